#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "calflow/error.hpp"
#include "calflow/image.hpp"

namespace calflow {

struct MetricReport {
  /// std::nullopt means the images are identical (infinite PSNR).
  std::optional<double> psnr;
  double ssim = 0.0;
};

/// 10 log10(1 / MSE) over all channels after clamping both inputs to [0,1].
/// Returns std::nullopt for identical images.
template <typename T>
std::optional<double> psnr(const BasicImage<T>& a, const BasicImage<T>& b) {
  require_same_shape(a, b, "psnr");
  detail::require(!a.empty(), ErrorCode::EmptyInput, "psnr: empty images");
  double sse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::clamp(static_cast<double>(a.data()[i]), 0.0, 1.0) -
                     std::clamp(static_cast<double>(b.data()[i]), 0.0, 1.0);
    sse += d * d;
  }
  if (sse == 0.0) return std::nullopt;
  return 10.0 * std::log10(static_cast<double>(a.size()) / sse);
}

struct SsimParams {
  static constexpr int window = 11;
  static constexpr double sigma = 1.5;
  static constexpr double k1 = 0.01;
  static constexpr double k2 = 0.03;
  static constexpr double dynamic_range = 1.0;
};

namespace detail {

inline std::array<double, SsimParams::window> gaussian_window() {
  std::array<double, SsimParams::window> w{};
  const int r = SsimParams::window / 2;
  double sum = 0.0;
  for (int i = 0; i < SsimParams::window; ++i) {
    const double d = i - r;
    w[i] = std::exp(-d * d / (2.0 * SsimParams::sigma * SsimParams::sigma));
    sum += w[i];
  }
  for (auto& v : w) v /= sum;
  return w;
}

// Separable 'valid' Gaussian filtering of an h x w plane.
inline std::vector<double> filter_valid(const std::vector<double>& src, std::size_t h, std::size_t w,
                                        const std::array<double, SsimParams::window>& k) {
  const std::size_t n = SsimParams::window;
  const std::size_t ow = w - n + 1, oh = h - n + 1;
  std::vector<double> rows(h * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += k[i] * src[y * w + x + i];
      rows[y * ow + x] = acc;
    }
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += k[i] * rows[(y + i) * ow + x];
      out[y * ow + x] = acc;
    }
  return out;
}

}  // namespace detail

/// Mean SSIM (11x11 Gaussian window, sigma 1.5, K1 = 0.01, K2 = 0.03,
/// dynamic range 1) computed per channel over the valid region and
/// averaged across channels. Inputs are clamped to [0,1] first.
template <typename T>
double ssim(const BasicImage<T>& a, const BasicImage<T>& b) {
  require_same_shape(a, b, "ssim");
  const std::size_t h = a.height(), w = a.width();
  detail::require(a.channels() > 0 && std::min(h, w) >= std::size_t(SsimParams::window),
                  ErrorCode::InvalidArgument,
                  "ssim: image " + a.shape_string() + " is smaller than the 11x11 window");
  const double c1 = std::pow(SsimParams::k1 * SsimParams::dynamic_range, 2);
  const double c2 = std::pow(SsimParams::k2 * SsimParams::dynamic_range, 2);
  const auto k = detail::gaussian_window();

  double total = 0.0;
  for (std::size_t c = 0; c < a.channels(); ++c) {
    const std::size_t n = h * w;
    std::vector<double> pa(n), pb(n), paa(n), pbb(n), pab(n);
    for (std::size_t i = 0; i < n; ++i) {
      pa[i] = std::clamp(static_cast<double>(a.plane(c)[i]), 0.0, 1.0);
      pb[i] = std::clamp(static_cast<double>(b.plane(c)[i]), 0.0, 1.0);
      paa[i] = pa[i] * pa[i];
      pbb[i] = pb[i] * pb[i];
      pab[i] = pa[i] * pb[i];
    }
    const auto ma = detail::filter_valid(pa, h, w, k);
    const auto mb = detail::filter_valid(pb, h, w, k);
    const auto faa = detail::filter_valid(paa, h, w, k);
    const auto fbb = detail::filter_valid(pbb, h, w, k);
    const auto fab = detail::filter_valid(pab, h, w, k);
    double sum = 0.0;
    for (std::size_t i = 0; i < ma.size(); ++i) {
      const double va = faa[i] - ma[i] * ma[i];
      const double vb = fbb[i] - mb[i] * mb[i];
      const double cov = fab[i] - ma[i] * mb[i];
      const double num = (2.0 * ma[i] * mb[i] + c1) * (2.0 * cov + c2);
      const double den = (ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2);
      sum += num / den;
    }
    total += sum / static_cast<double>(ma.size());
  }
  return total / static_cast<double>(a.channels());
}

template <typename T>
MetricReport evaluate(const BasicImage<T>& restored, const BasicImage<T>& reference) {
  return MetricReport{psnr(restored, reference), ssim(restored, reference)};
}

}  // namespace calflow
