#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>

#include "calflow/error.hpp"
#include "calflow/image.hpp"

// Minimal layers for the toy flow. Each forward has a hand-written backward.
namespace calflow::nn {

/// View of one 3x3 convolution's parameters inside a flat parameter vector.
/// Weights are laid out [out][in][3][3], followed by `out` biases.
struct Conv3x3 {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t offset = 0;

  std::size_t weight_count() const noexcept { return out * in * 9; }
  std::size_t param_count() const noexcept { return weight_count() + out; }
};

template <typename T>
BasicImage<T> conv_forward(const Conv3x3& conv, std::span<const T> params, const BasicImage<T>& x) {
  detail::require(x.channels() == conv.in, ErrorCode::ShapeMismatch,
                  "conv expects " + std::to_string(conv.in) + " input channels, got " +
                      std::to_string(x.channels()));
  const T* w = params.data() + conv.offset;
  const T* b = w + conv.weight_count();
  const std::size_t h = x.height(), wd = x.width();
  BasicImage<T> y(conv.out, h, wd);
  for (std::size_t co = 0; co < conv.out; ++co) {
    auto dst_plane = y.plane(co);
    std::fill(dst_plane.begin(), dst_plane.end(), b[co]);
    for (std::size_t ci = 0; ci < conv.in; ++ci) {
      const T* src_plane = x.plane(ci).data();
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const T wv = w[((co * conv.in + ci) * 3 + ky) * 3 + kx];
          const long dy = ky - 1, dx = kx - 1;
          const long y0 = std::max(0L, -dy), y1 = std::min<long>(h, long(h) - dy);
          const long x0 = std::max(0L, -dx), x1 = std::min<long>(wd, long(wd) - dx);
          for (long yy = y0; yy < y1; ++yy) {
            const T* src = src_plane + (yy + dy) * long(wd) + dx;
            T* dst = dst_plane.data() + yy * long(wd);
            for (long xx = x0; xx < x1; ++xx) dst[xx] += wv * src[xx];
          }
        }
    }
  }
  return y;
}

/// Accumulates parameter gradients into `grad` and, when `gx` is non-null,
/// writes the input gradient there.
template <typename T>
void conv_backward(const Conv3x3& conv, std::span<const T> params, const BasicImage<T>& x,
                   const BasicImage<T>& gy, std::span<T> grad, BasicImage<T>* gx) {
  const T* w = params.data() + conv.offset;
  T* gw = grad.data() + conv.offset;
  T* gb = gw + conv.weight_count();
  const std::size_t h = x.height(), wd = x.width();
  if (gx) *gx = BasicImage<T>(conv.in, h, wd);
  for (std::size_t co = 0; co < conv.out; ++co) {
    const T* g_plane = gy.plane(co).data();
    T bsum = 0;
    for (std::size_t i = 0; i < h * wd; ++i) bsum += g_plane[i];
    gb[co] += bsum;
    for (std::size_t ci = 0; ci < conv.in; ++ci) {
      const T* src_plane = x.plane(ci).data();
      T* gx_plane = gx ? gx->plane(ci).data() : nullptr;
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const std::size_t widx = ((co * conv.in + ci) * 3 + ky) * 3 + kx;
          const T wv = w[widx];
          const long dy = ky - 1, dx = kx - 1;
          const long y0 = std::max(0L, -dy), y1 = std::min<long>(h, long(h) - dy);
          const long x0 = std::max(0L, -dx), x1 = std::min<long>(wd, long(wd) - dx);
          T acc = 0;
          for (long yy = y0; yy < y1; ++yy) {
            const T* src = src_plane + (yy + dy) * long(wd) + dx;
            const T* g = g_plane + yy * long(wd);
            for (long xx = x0; xx < x1; ++xx) acc += g[xx] * src[xx];
            if (gx_plane) {
              T* gdst = gx_plane + (yy + dy) * long(wd) + dx;
              for (long xx = x0; xx < x1; ++xx) gdst[xx] += wv * g[xx];
            }
          }
          gw[widx] += acc;
        }
    }
  }
}

template <typename T>
void tanh_inplace(BasicImage<T>& x) {
  for (auto& v : x.data()) v = std::tanh(v);
}

/// g <- g * (1 - a^2) where a = tanh(pre).
template <typename T>
void tanh_backward_inplace(const BasicImage<T>& activated, BasicImage<T>& g) {
  auto a = activated.values();
  auto gv = g.values();
  for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= T(1) - a[i] * a[i];
}

/// Channel slice [first, first + count).
template <typename T>
BasicImage<T> channel_slice(const BasicImage<T>& x, std::size_t first, std::size_t count) {
  BasicImage<T> out(count, x.height(), x.width());
  const auto n = x.plane_size();
  std::copy_n(x.data().begin() + first * n, count * n, out.data().begin());
  return out;
}

template <typename T>
BasicImage<T> concat_channels(const BasicImage<T>& a, const BasicImage<T>& b) {
  detail::require(a.height() == b.height() && a.width() == b.width(), ErrorCode::ShapeMismatch,
                  "concat_channels: spatial sizes differ");
  BasicImage<T> out(a.channels() + b.channels(), a.height(), a.width());
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + a.size());
  return out;
}

template <typename T>
BasicImage<T> reverse_channels(const BasicImage<T>& x) {
  BasicImage<T> out(x.channels(), x.height(), x.width());
  for (std::size_t c = 0; c < x.channels(); ++c) {
    auto src = x.plane(x.channels() - 1 - c);
    std::copy(src.begin(), src.end(), out.plane(c).begin());
  }
  return out;
}

/// Space-to-channel: (c, 2y+dy, 2x+dx) -> (4c + 2dy + dx, y, x).
template <typename T>
BasicImage<T> squeeze(const BasicImage<T>& x) {
  detail::require(x.height() % 2 == 0 && x.width() % 2 == 0, ErrorCode::InvalidArgument,
                  "squeeze: spatial size " + std::to_string(x.height()) + "x" +
                      std::to_string(x.width()) + " is not divisible by 2");
  const std::size_t h = x.height() / 2, w = x.width() / 2;
  BasicImage<T> out(x.channels() * 4, h, w);
  for (std::size_t c = 0; c < x.channels(); ++c)
    for (std::size_t dy = 0; dy < 2; ++dy)
      for (std::size_t dx = 0; dx < 2; ++dx)
        for (std::size_t yy = 0; yy < h; ++yy)
          for (std::size_t xx = 0; xx < w; ++xx)
            out(4 * c + 2 * dy + dx, yy, xx) = x(c, 2 * yy + dy, 2 * xx + dx);
  return out;
}

template <typename T>
BasicImage<T> unsqueeze(const BasicImage<T>& z) {
  detail::require(z.channels() % 4 == 0, ErrorCode::InvalidArgument,
                  "unsqueeze: channel count must be divisible by 4");
  const std::size_t h = z.height(), w = z.width();
  BasicImage<T> out(z.channels() / 4, h * 2, w * 2);
  for (std::size_t c = 0; c < out.channels(); ++c)
    for (std::size_t dy = 0; dy < 2; ++dy)
      for (std::size_t dx = 0; dx < 2; ++dx)
        for (std::size_t yy = 0; yy < h; ++yy)
          for (std::size_t xx = 0; xx < w; ++xx)
            out(c, 2 * yy + dy, 2 * xx + dx) = z(4 * c + 2 * dy + dx, yy, xx);
  return out;
}

}  // namespace calflow::nn
