#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "calflow/error.hpp"

namespace calflow {

/// R uniformly spaced nodes t_1 = lower ... t_R = upper.
class HistogramGrid {
 public:
  HistogramGrid() = default;

  double lower() const noexcept { return lower_; }
  double upper() const noexcept { return upper_; }
  std::size_t bins() const noexcept { return bins_; }
  /// Node spacing (upper - lower) / (R - 1).
  double step() const noexcept { return step_; }
  double node(std::size_t r) const noexcept {
    return r + 1 == bins_ ? upper_ : lower_ + static_cast<double>(r) * step_;
  }
  std::vector<double> nodes() const {
    std::vector<double> t(bins_);
    for (std::size_t r = 0; r < bins_; ++r) t[r] = node(r);
    return t;
  }

  friend bool operator==(const HistogramGrid&, const HistogramGrid&) = default;

 private:
  friend HistogramGrid make_grid(double, double, std::size_t);
  double lower_ = 0.0;
  double upper_ = 1.0;
  std::size_t bins_ = 0;
  double step_ = 0.0;
};

inline HistogramGrid make_grid(double lower, double upper, std::size_t bins) {
  detail::require(bins >= 2, ErrorCode::InvalidArgument,
                  "histogram grid needs at least 2 bins, got " + std::to_string(bins));
  detail::require(std::isfinite(lower) && std::isfinite(upper) && upper > lower,
                  ErrorCode::InvalidArgument, "histogram grid needs upper > lower");
  HistogramGrid g;
  g.lower_ = lower;
  g.upper_ = upper;
  g.bins_ = bins;
  g.step_ = (upper - lower) / static_cast<double>(bins - 1);
  return g;
}

/// Cauchy kernel 1 / (1 + delta * d^2) sharpness.
struct KernelConfig {
  double delta = 0.0;

  /// delta = (2 / step)^2: the kernel drops to one half at half a bin width.
  static KernelConfig for_grid(const HistogramGrid& grid) {
    const double s = 2.0 / grid.step();
    return KernelConfig{s * s};
  }
};

struct SoftHistogram {
  HistogramGrid grid;
  std::vector<double> mass;
  bool normalized = false;
};

namespace detail {

inline void check_kernel(const KernelConfig& k) {
  require(k.delta > 0.0 && std::isfinite(k.delta), ErrorCode::InvalidArgument,
          "kernel delta must be positive and finite");
}

inline double cauchy(double delta, double d) { return 1.0 / (1.0 + delta * d * d); }

// d/dp of cauchy(delta, p - t).
inline double cauchy_slope(double delta, double d) {
  const double q = 1.0 + delta * d * d;
  return -2.0 * delta * d / (q * q);
}

}  // namespace detail

/// Unnormalized per-node kernel sums over one pixel plane. Pixels are summed
/// in ascending order, so any permutation of the plane gives identical bits.
template <typename T>
std::vector<double> soft_hist_counts(std::span<const T> plane, const HistogramGrid& grid,
                                     const KernelConfig& k) {
  detail::require(!plane.empty(), ErrorCode::EmptyInput, "soft_hist: empty pixel plane");
  detail::check_kernel(k);
  const auto nodes = grid.nodes();
  std::vector<double> sorted(plane.begin(), plane.end());
  detail::require(std::all_of(sorted.begin(), sorted.end(), [](double v) { return std::isfinite(v); }),
                  ErrorCode::NonFinite, "soft_hist: non-finite pixel value");
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> counts(grid.bins(), 0.0);
  for (const double p : sorted) {
    for (std::size_t r = 0; r < nodes.size(); ++r) counts[r] += detail::cauchy(k.delta, p - nodes[r]);
  }
  return counts;
}

/// Differentiable histogram of one channel: each pixel deposits a Cauchy
/// kernel weight on every node, and the result is divided by its total.
template <typename T>
SoftHistogram soft_hist(std::span<const T> plane, const HistogramGrid& grid,
                        const KernelConfig& k) {
  SoftHistogram h{grid, soft_hist_counts(plane, grid, k), true};
  const double total = std::accumulate(h.mass.begin(), h.mass.end(), 0.0);
  for (auto& m : h.mass) m /= total;
  return h;
}

inline void require_normalized(const SoftHistogram& h, const char* what) {
  detail::require(h.normalized, ErrorCode::NotNormalized,
                  std::string(what) + ": histogram is not normalized");
  detail::require(h.mass.size() == h.grid.bins(), ErrorCode::ShapeMismatch,
                  std::string(what) + ": mass length does not match grid");
  const double total = std::accumulate(h.mass.begin(), h.mass.end(), 0.0);
  detail::require(std::abs(total - 1.0) <= 1e-9, ErrorCode::NotNormalized,
                  std::string(what) + ": masses sum to " + std::to_string(total) + ", not 1");
}

/// Prefix sums F_k = sum_{r <= k} mass_r.
inline std::vector<double> cdf(const SoftHistogram& h) {
  require_normalized(h, "cdf");
  std::vector<double> f(h.mass.size());
  std::partial_sum(h.mass.begin(), h.mass.end(), f.begin());
  return f;
}

/// Vector-Jacobian product of soft_hist: given dL/dmass, returns dL/dpixel.
///
/// With n_r the kernel sums and Z = sum_r n_r, mass_r = n_r / Z, so
///   dL/dp = (1/Z) * sum_r k'(p - t_r) * (u_r - sum_s u_s mass_s).
/// A constant upstream vector therefore yields exactly zero.
template <typename T>
std::vector<T> soft_hist_backward(std::span<const T> plane, const HistogramGrid& grid,
                                  const KernelConfig& k, std::span<const double> upstream) {
  detail::require(upstream.size() == grid.bins(), ErrorCode::ShapeMismatch,
                  "soft_hist_backward: upstream has " + std::to_string(upstream.size()) +
                      " entries, grid has " + std::to_string(grid.bins()));
  const auto counts = soft_hist_counts(plane, grid, k);
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  double mean_u = 0.0;
  for (std::size_t r = 0; r < counts.size(); ++r) mean_u += upstream[r] * counts[r];
  mean_u /= total;

  std::vector<double> centered(upstream.begin(), upstream.end());
  for (auto& u : centered) u -= mean_u;

  const auto nodes = grid.nodes();
  std::vector<T> grad(plane.size());
  for (std::size_t i = 0; i < plane.size(); ++i) {
    const double p = static_cast<double>(plane[i]);
    double acc = 0.0;
    for (std::size_t r = 0; r < nodes.size(); ++r)
      acc += detail::cauchy_slope(k.delta, p - nodes[r]) * centered[r];
    grad[i] = static_cast<T>(acc / total);
  }
  return grad;
}

/// Writes `node,mass` rows with 9 significant digits.
inline void write_histogram_csv(const SoftHistogram& h, const std::filesystem::path& path) {
  std::ofstream out(path);
  detail::require(static_cast<bool>(out), ErrorCode::WriteFailed,
                  "cannot open " + path.string() + " for writing");
  out << "node,mass\n";
  char buf[64];
  for (std::size_t r = 0; r < h.mass.size(); ++r) {
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g\n", h.grid.node(r), h.mass[r]);
    out << buf;
  }
  detail::require(static_cast<bool>(out), ErrorCode::WriteFailed,
                  "failed writing " + path.string());
}

}  // namespace calflow
