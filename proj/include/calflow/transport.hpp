#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "calflow/error.hpp"
#include "calflow/histogram.hpp"

namespace calflow {

struct TransportResult {
  double distance = 0.0;
  /// d distance / d mass of the first histogram.
  std::vector<double> grad_first;
};

namespace detail {

inline void require_comparable(const SoftHistogram& a, const SoftHistogram& b, const char* what) {
  require_normalized(a, what);
  require_normalized(b, what);
  require(a.grid == b.grid, ErrorCode::GridMismatch,
          std::string(what) + ": histograms live on different grids");
}

inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace detail

/// W1 through the CDF identity: step * sum_r |F1(t_r) - F2(t_r)|.
inline TransportResult w1_cdf(const SoftHistogram& h1, const SoftHistogram& h2) {
  detail::require_comparable(h1, h2, "w1_cdf");
  const std::size_t n = h1.mass.size();
  const double step = h1.grid.step();

  std::vector<double> sign(n);
  double f1 = 0.0, f2 = 0.0, sum = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    f1 += h1.mass[r];
    f2 += h2.mass[r];
    sum += std::abs(f1 - f2);
    sign[r] = detail::sign0(f1 - f2);
  }

  TransportResult res;
  res.distance = step * sum;
  res.grad_first.assign(n, 0.0);
  // mass_j enters every F1(t_k) with k >= j.
  double suffix = 0.0;
  for (std::size_t j = n; j-- > 0;) {
    suffix += sign[j];
    res.grad_first[j] = step * suffix;
  }
  return res;
}

namespace detail {

// Smallest node whose CDF reaches alpha.
inline double inverse_cdf(const std::vector<double>& f, const HistogramGrid& grid, double alpha) {
  for (std::size_t r = 0; r < f.size(); ++r)
    if (f[r] >= alpha) return grid.node(r);
  return grid.node(f.size() - 1);
}

}  // namespace detail

/// Wp via midpoint quadrature of the quantile functions at (q - 0.5) / Q.
inline double wp_quantile(const SoftHistogram& h1, const SoftHistogram& h2, double p,
                          std::size_t quantiles) {
  detail::require(p >= 1.0 && std::isfinite(p), ErrorCode::InvalidArgument,
                  "wp_quantile: exponent p must be >= 1");
  detail::require(quantiles >= 1, ErrorCode::InvalidArgument,
                  "wp_quantile: quantile count must be >= 1");
  detail::require_comparable(h1, h2, "wp_quantile");
  const auto f1 = cdf(h1);
  const auto f2 = cdf(h2);
  const double q = static_cast<double>(quantiles);
  double acc = 0.0;
  for (std::size_t i = 1; i <= quantiles; ++i) {
    const double alpha = (static_cast<double>(i) - 0.5) / q;
    const double gap = std::abs(detail::inverse_cdf(f1, h1.grid, alpha) -
                                detail::inverse_cdf(f2, h2.grid, alpha));
    acc += std::pow(gap, p);
  }
  return std::pow(acc / q, 1.0 / p);
}

/// Exact 1D optimal transport cost^(1/p) by greedy two-pointer mass matching
/// over sorted nodes (the monotone coupling is optimal for convex costs).
inline double ot_oracle(const SoftHistogram& h1, const SoftHistogram& h2, double p) {
  detail::require(p >= 1.0 && std::isfinite(p), ErrorCode::InvalidArgument,
                  "ot_oracle: exponent p must be >= 1");
  detail::require_comparable(h1, h2, "ot_oracle");
  const std::size_t n = h1.mass.size();
  std::vector<double> a = h1.mass, b = h2.mass;
  std::size_t i = 0, j = 0;
  double cost = 0.0;
  while (i < n && j < n) {
    if (a[i] <= 0.0) { ++i; continue; }
    if (b[j] <= 0.0) { ++j; continue; }
    const double moved = std::min(a[i], b[j]);
    cost += moved * std::pow(std::abs(h1.grid.node(i) - h2.grid.node(j)), p);
    a[i] -= moved;
    b[j] -= moved;
    if (a[i] <= b[j]) ++i; else ++j;
  }
  return std::pow(cost, 1.0 / p);
}

}  // namespace calflow
