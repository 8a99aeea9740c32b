#pragma once

// Deliberately naive reference computations used only by the tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "calflow/calflow.hpp"

namespace oracle {

/// O(R^2) prefix sums.
inline std::vector<double> prefix_sums(const std::vector<double>& m) {
  std::vector<double> out(m.size(), 0.0);
  for (std::size_t k = 0; k < m.size(); ++k)
    for (std::size_t r = 0; r <= k; ++r) out[k] += m[r];
  return out;
}

/// Cauchy-kernel histogram written straight from the formula.
inline std::vector<double> soft_hist(const std::vector<double>& plane, double a, double b,
                                     std::size_t bins, double delta) {
  std::vector<double> h(bins, 0.0);
  for (std::size_t r = 0; r < bins; ++r) {
    const double t = a + (b - a) * static_cast<double>(r) / static_cast<double>(bins - 1);
    for (double p : plane) h[r] += 1.0 / (1.0 + delta * (p - t) * (p - t));
  }
  double z = 0.0;
  for (double v : h) z += v;
  for (double& v : h) v /= z;
  return h;
}

/// Two-loop MSE over channels and pixels, values clamped to [0,1].
inline double mse(const calflow::Image& a, const calflow::Image& b) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < a.channels(); ++c)
    for (std::size_t y = 0; y < a.height(); ++y)
      for (std::size_t x = 0; x < a.width(); ++x) {
        const double d = std::clamp<double>(a(c, y, x), 0.0, 1.0) - std::clamp<double>(b(c, y, x), 0.0, 1.0);
        acc += d * d;
        ++n;
      }
  return acc / static_cast<double>(n);
}

using VecFn = std::function<std::vector<double>(const std::vector<double>&)>;

/// Central-difference Jacobian, row i = d f_i.
inline std::vector<std::vector<double>> jacobian(const VecFn& f, const std::vector<double>& x,
                                                 double eps = 1e-6) {
  const std::size_t n = x.size();
  const std::size_t m = f(x).size();
  std::vector<std::vector<double>> j(m, std::vector<double>(n, 0.0));
  for (std::size_t k = 0; k < n; ++k) {
    auto xp = x, xm = x;
    xp[k] += eps;
    xm[k] -= eps;
    const auto fp = f(xp), fm = f(xm);
    for (std::size_t i = 0; i < m; ++i) j[i][k] = (fp[i] - fm[i]) / (2.0 * eps);
  }
  return j;
}

/// log |det A| by LU with partial pivoting.
inline double log_abs_det(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  double acc = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(a[i][k]) > std::abs(a[piv][k])) piv = i;
    std::swap(a[k], a[piv]);
    if (a[k][k] == 0.0) return -INFINITY;
    acc += std::log(std::abs(a[k][k]));
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = a[i][k] / a[k][k];
      for (std::size_t c = k; c < n; ++c) a[i][c] -= f * a[k][c];
    }
  }
  return acc;
}

/// Copies every parameter block of `src` whose name also exists in `dst`.
template <typename T>
void copy_shared_blocks(calflow::ConditionalFlow<T>& src, calflow::ConditionalFlow<T>& dst) {
  for (const auto& b : dst.layout()) {
    auto to = dst.block(b.name);
    auto from = src.block(b.name);
    std::copy(from.begin(), from.end(), to.begin());
  }
}

template <typename T>
calflow::BasicImage<T> random_image(std::size_t c, std::size_t h, std::size_t w, std::mt19937_64& rng,
                                    double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  calflow::BasicImage<T> img(c, h, w);
  for (auto& v : img.data()) v = static_cast<T>(u(rng));
  return img;
}

inline calflow::SoftHistogram random_hist(const calflow::HistogramGrid& g, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  calflow::SoftHistogram h{g, std::vector<double>(g.bins()), true};
  double z = 0.0;
  for (auto& v : h.mass) z += (v = u(rng));
  for (auto& v : h.mass) v /= z;
  return h;
}

inline calflow::SoftHistogram point_mass(const calflow::HistogramGrid& g, std::size_t at) {
  calflow::SoftHistogram h{g, std::vector<double>(g.bins(), 0.0), true};
  h.mass[at] = 1.0;
  return h;
}

}  // namespace oracle
