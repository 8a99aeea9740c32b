#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "calflow/flow.hpp"
#include "calflow/histogram.hpp"
#include "calflow/losses.hpp"
#include "calflow/optim.hpp"

// Finite-difference checks of every hand-written backward pass, run in
// double precision with central differences.
namespace calflow::gradcheck {

struct Report {
  std::string name;
  double max_rel_error = 0.0;
  double threshold = 0.0;
  std::size_t samples = 0;
  std::size_t skipped = 0;
  std::string detail;

  bool passed() const { return samples > 0 && max_rel_error < threshold; }
};

inline constexpr double kStep = 1e-6;
inline constexpr double kHistThreshold = 1e-6;
inline constexpr double kCalThreshold = 1e-5;
inline constexpr double kFlowThreshold = 1e-3;
/// CAL samples whose CDF gap |F1 - F2| at any interior node falls below this
/// are skipped: a central difference there straddles the |.| kink.
inline constexpr double kKinkMargin = 1e-5;

/// d(upstream . soft_hist(plane))/d(plane) on random 8-pixel planes.
inline Report histogram(std::size_t samples = 100, std::uint64_t seed = 1) {
  Rng rng(seed);
  std::uniform_real_distribution<double> pix(0.0, 1.0), up(-1.0, 1.0);
  const auto grid = make_grid(0.0, 1.0, 64);
  const auto kernel = KernelConfig::for_grid(grid);
  Report rep{"hist", 0.0, kHistThreshold, 0, 0, {}};
  for (std::size_t s = 0; s < samples; ++s) {
    std::vector<double> plane(8), upstream(grid.bins());
    for (auto& v : plane) v = pix(rng);
    for (auto& v : upstream) v = up(rng);
    auto f = [&](std::span<const double> p) {
      const auto h = soft_hist(p, grid, kernel);
      double acc = 0.0;
      for (std::size_t r = 0; r < h.mass.size(); ++r) acc += upstream[r] * h.mass[r];
      return acc;
    };
    auto g = [&](std::span<const double> p) {
      return soft_hist_backward(p, grid, kernel, std::span<const double>(upstream));
    };
    const auto res = grad_check(f, g, plane, kStep);
    rep.max_rel_error = std::max(rep.max_rel_error, res.max_rel_error);
    ++rep.samples;
  }
  return rep;
}

/// Smallest |F1 - F2| over interior nodes and channels.
inline double cdf_gap(const BasicImage<double>& a, const BasicImage<double>& b, const LossConfig& cfg) {
  double gap = INFINITY;
  for (std::size_t c = 0; c < a.channels(); ++c) {
    const auto fa = cdf(soft_hist(a.plane(c), cfg.grid, cfg.kernel));
    const auto fb = cdf(soft_hist(b.plane(c), cfg.grid, cfg.kernel));
    for (std::size_t k = 0; k + 1 < fa.size(); ++k) gap = std::min(gap, std::abs(fa[k] - fb[k]));
  }
  return gap;
}

/// cal_loss pixel gradient on random 8x8 pairs, kink-excluded.
inline Report cal(std::size_t samples = 20, std::uint64_t seed = 2) {
  Rng rng(seed);
  std::uniform_real_distribution<double> pix(0.0, 1.0);
  const LossConfig cfg;
  Report rep{"cal", 0.0, kCalThreshold, 0, 0, {}};
  std::size_t attempts = 0;
  while (rep.samples < samples && attempts < samples * 20) {
    ++attempts;
    BasicImage<double> a(3, 8, 8), b(3, 8, 8);
    for (auto& v : a.data()) v = pix(rng);
    for (auto& v : b.data()) v = pix(rng);
    if (cdf_gap(a, b, cfg) < kKinkMargin) {
      ++rep.skipped;
      continue;
    }
    auto f = [&](std::span<const double> p) {
      BasicImage<double> img(3, 8, 8, std::vector<double>(p.begin(), p.end()));
      return cal_loss(img, b, cfg, false).value;
    };
    auto g = [&](std::span<const double> p) {
      BasicImage<double> img(3, 8, 8, std::vector<double>(p.begin(), p.end()));
      return cal_loss(img, b, cfg).grad.data();
    };
    const auto res = grad_check(f, g, a.data(), kStep);
    rep.max_rel_error = std::max(rep.max_rel_error, res.max_rel_error);
    ++rep.samples;
  }
  return rep;
}

/// Tiny flow (one step, 3x4x4 input) with every parameter randomized.
inline ConditionalFlow<double> tiny_flow(Rng& rng, std::size_t steps = 1) {
  FlowConfig cfg;
  cfg.steps = steps;
  ConditionalFlow<double> flow(cfg);
  flow.init_random(rng, 1.0, false);
  std::normal_distribution<double> n(0.0, 0.3);
  for (std::size_t s = 0; s < steps; ++s) {
    for (auto& v : flow.block("step" + std::to_string(s) + ".actnorm.shift")) v = n(rng);
    for (auto& v : flow.block("step" + std::to_string(s) + ".actnorm.log_scale")) v = n(rng);
  }
  for (const auto& b : flow.layout())
    if (b.name.ends_with(".bias"))
      for (auto& v : flow.block(b.name)) v = n(rng);
  flow.set_actnorm_initialized(true);
  return flow;
}

/// NLL parameter gradient of a tiny flow.
inline Report flow_nll(std::size_t samples = 1, std::uint64_t seed = 3) {
  Rng rng(seed);
  std::uniform_real_distribution<double> pix(0.0, 1.0);
  Report rep{"flow", 0.0, kFlowThreshold, 0, 0, {}};
  for (std::size_t s = 0; s < samples; ++s) {
    auto flow = tiny_flow(rng);
    BasicImage<double> y(3, 4, 4), x(3, 4, 4);
    for (auto& v : y.data()) v = pix(rng);
    for (auto& v : x.data()) v = pix(rng);
    const std::vector<double> theta(flow.params().begin(), flow.params().end());
    auto f = [&](std::span<const double> p) {
      std::copy(p.begin(), p.end(), flow.params().begin());
      return flow.nll(y, x);
    };
    auto g = [&](std::span<const double> p) {
      std::copy(p.begin(), p.end(), flow.params().begin());
      std::vector<double> grad(flow.param_count(), 0.0);
      flow.nll_with_grad(y, x, grad);
      return grad;
    };
    const auto res = grad_check(f, g, theta, kStep);
    std::string block;
    const double rel = max_block_rel_error(res, flow.layout(), &block);
    if (rel >= rep.max_rel_error) rep.detail = "worst block " + block;
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
    ++rep.samples;
  }
  return rep;
}

/// Parameter gradient of <u, enhance(x, 0)> through the inverse pass.
inline Report flow_enhance(std::size_t samples = 1, std::uint64_t seed = 4) {
  Rng rng(seed);
  std::uniform_real_distribution<double> pix(0.0, 1.0), up(-1.0, 1.0);
  Report rep{"flow-enhance", 0.0, kFlowThreshold, 0, 0, {}};
  for (std::size_t s = 0; s < samples; ++s) {
    auto flow = tiny_flow(rng, 2);
    BasicImage<double> x(3, 4, 4), u(3, 4, 4);
    for (auto& v : x.data()) v = pix(rng);
    for (auto& v : u.data()) v = up(rng);
    const std::vector<double> theta(flow.params().begin(), flow.params().end());
    auto f = [&](std::span<const double> p) {
      std::copy(p.begin(), p.end(), flow.params().begin());
      const auto out = flow.enhance(x, 0.0);
      double acc = 0.0;
      for (std::size_t i = 0; i < out.size(); ++i) acc += u.data()[i] * out.data()[i];
      return acc;
    };
    auto g = [&](std::span<const double> p) {
      std::copy(p.begin(), p.end(), flow.params().begin());
      std::vector<double> grad(flow.param_count(), 0.0);
      flow.enhance_vjp(x, u, grad);
      return grad;
    };
    const auto res = grad_check(f, g, theta, kStep);
    std::string block;
    const double rel = max_block_rel_error(res, flow.layout(), &block);
    if (rel >= rep.max_rel_error) rep.detail = "worst block " + block;
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
    ++rep.samples;
  }
  return rep;
}

}  // namespace calflow::gradcheck
