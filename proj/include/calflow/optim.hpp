#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "calflow/error.hpp"
#include "calflow/flow.hpp"
#include "calflow/image.hpp"
#include "calflow/losses.hpp"

namespace calflow {

enum class OptimizerMethod { Sgd, Adam };

struct OptimizerState {
  OptimizerMethod method = OptimizerMethod::Adam;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step_count = 0;
};

namespace detail {

inline std::string block_name_for(std::size_t index, std::span<const ParamBlock> blocks) {
  for (const auto& b : blocks)
    if (index >= b.offset && index < b.offset + b.size)
      return b.name + "[" + std::to_string(index - b.offset) + "]";
  return "param[" + std::to_string(index) + "]";
}

template <typename T>
void check_update_inputs(std::span<T> params, std::span<const T> grads,
                         std::span<const ParamBlock> blocks) {
  require(params.size() == grads.size(), ErrorCode::ShapeMismatch,
          "optimizer: " + std::to_string(params.size()) + " parameters but " +
              std::to_string(grads.size()) + " gradients");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!std::isfinite(static_cast<double>(grads[i])))
      fail(ErrorCode::NonFinite, "non-finite gradient in " + block_name_for(i, blocks));
}

template <typename T>
void check_params_finite(std::span<T> params, std::span<const ParamBlock> blocks) {
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!std::isfinite(static_cast<double>(params[i])))
      fail(ErrorCode::NonFinite, "update produced non-finite value in " + block_name_for(i, blocks));
}

}  // namespace detail

/// Adam with bias correction. `blocks` only serves error messages.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, OptimizerState& state,
               std::span<const ParamBlock> blocks = {}) {
  detail::check_update_inputs(params, grads, blocks);
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  detail::require(state.m.size() == params.size() && state.v.size() == params.size(),
                  ErrorCode::ShapeMismatch, "adam: moment buffers do not match parameters");
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] = static_cast<T>(static_cast<double>(params[i]) -
                               state.lr * mhat / (std::sqrt(vhat) + state.eps));
  }
  detail::check_params_finite(params, blocks);
}

template <typename T>
void sgd_step(std::span<T> params, std::span<const T> grads, OptimizerState& state,
              std::span<const ParamBlock> blocks = {}) {
  detail::check_update_inputs(params, grads, blocks);
  ++state.step_count;
  for (std::size_t i = 0; i < params.size(); ++i)
    params[i] = static_cast<T>(static_cast<double>(params[i]) -
                               state.lr * static_cast<double>(grads[i]));
  detail::check_params_finite(params, blocks);
}

template <typename T>
void optimizer_step(std::span<T> params, std::span<const T> grads, OptimizerState& state,
                    std::span<const ParamBlock> blocks = {}) {
  if (state.method == OptimizerMethod::Adam)
    adam_step(params, grads, state, blocks);
  else
    sgd_step(params, grads, state, blocks);
}

// ------------------------------------------------------------- gradient check

struct GradCheckResult {
  /// max_i |a_i - n_i| / max(|a|_inf, |n|_inf, 1e-12): the error relative to
  /// the gradient's own magnitude.
  double max_rel_error = 0.0;
  /// max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-12); informational, blows up
  /// on coordinates whose true derivative is near zero.
  double max_coord_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Compares `grad(x)` against central differences (f(x+eps e_i) - f(x-eps e_i)) / 2eps.
inline GradCheckResult grad_check(const std::function<double(std::span<const double>)>& f,
                                  const std::function<std::vector<double>(std::span<const double>)>& grad,
                                  std::span<const double> x, double eps = 1e-6) {
  detail::require(eps > 0.0, ErrorCode::InvalidArgument, "grad_check: step must be positive");
  const auto analytic = grad(x);
  detail::require(analytic.size() == x.size(), ErrorCode::ShapeMismatch,
                  "grad_check: gradient length differs from input length");
  std::vector<double> probe(x.begin(), x.end());
  GradCheckResult res;
  res.analytic = analytic;
  res.numeric.resize(x.size());
  double scale = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double fp = f(probe);
    probe[i] = x[i] - eps;
    const double fm = f(probe);
    probe[i] = x[i];
    detail::require(std::isfinite(fp) && std::isfinite(fm) && std::isfinite(analytic[i]),
                    ErrorCode::NonFinite,
                    "grad_check: non-finite value at coordinate " + std::to_string(i));
    const double numeric = (fp - fm) / (2.0 * eps);
    res.numeric[i] = numeric;
    const double err = std::abs(analytic[i] - numeric);
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric)});
    res.max_coord_rel_error = std::max(
        res.max_coord_rel_error, err / std::max({std::abs(analytic[i]), std::abs(numeric), 1e-12}));
    if (i == 0 || err > res.max_abs_error) {
      res.max_abs_error = err;
      res.worst_index = i;
      res.analytic_at_worst = analytic[i];
      res.numeric_at_worst = numeric;
    }
  }
  res.max_rel_error = res.max_abs_error / std::max(scale, 1e-12);
  return res;
}

/// Largest per-block relative error: within each block, max |a - n| over
/// max(|a|_inf, |n|_inf, 1e-12) of that block.
inline double max_block_rel_error(const GradCheckResult& r, std::span<const ParamBlock> blocks,
                                  std::string* worst_block = nullptr) {
  double worst = 0.0;
  for (const auto& b : blocks) {
    double err = 0.0, scale = 0.0;
    for (std::size_t i = b.offset; i < b.offset + b.size; ++i) {
      err = std::max(err, std::abs(r.analytic[i] - r.numeric[i]));
      scale = std::max({scale, std::abs(r.analytic[i]), std::abs(r.numeric[i])});
    }
    const double rel = err / std::max(scale, 1e-12);
    if (rel > worst) {
      worst = rel;
      if (worst_block) *worst_block = b.name;
    }
  }
  return worst;
}

// ---------------------------------------------------- pixel-space CAL descent

struct PixelDescentConfig {
  std::size_t steps = 500;
  double lr = 1e-2;
  /// Backtracking: halve the step until the loss does not increase.
  bool monotone = true;
  std::size_t max_halvings = 10;
};

template <typename T>
struct PixelDescentResult {
  BasicImage<T> image;
  /// Summed per-channel W1 before the first step and after each step.
  std::vector<double> trajectory;
};

/// Gradient descent on CAL with respect to the pixels of a copy of `init`.
///
/// The CAL gradient of one pixel scales like 1 / (pixels per channel), so the
/// step is lr * (pixels per channel) * gradient; lr is then independent of
/// image size.
template <typename T>
PixelDescentResult<T> optimize_pixels_cal(const BasicImage<T>& init, const BasicImage<T>& reference,
                                          const PixelDescentConfig& pcfg,
                                          const LossConfig& lcfg = {}) {
  require_same_shape(init, reference, "optimize_pixels_cal");
  detail::require(pcfg.lr > 0.0, ErrorCode::InvalidArgument, "optimize_pixels_cal: lr must be > 0");
  LossConfig cfg = lcfg;
  cfg.reduction = ChannelReduction::Sum;

  PixelDescentResult<T> res{init, {}};
  auto current = cal_loss(res.image, reference, cfg);
  detail::require(std::isfinite(current.value), ErrorCode::NonFinite,
                  "optimize_pixels_cal: non-finite initial loss");
  res.trajectory.push_back(current.value);
  const double scale = static_cast<double>(init.plane_size());

  for (std::size_t step = 0; step < pcfg.steps; ++step) {
    double lr = pcfg.lr * scale;
    for (std::size_t attempt = 0; attempt <= (pcfg.monotone ? pcfg.max_halvings : 0); ++attempt) {
      BasicImage<T> trial = res.image;
      for (std::size_t i = 0; i < trial.size(); ++i)
        trial.data()[i] -= static_cast<T>(lr * static_cast<double>(current.grad.data()[i]));
      const double value = cal_loss(trial, reference, cfg, false).value;
      detail::require(std::isfinite(value), ErrorCode::NonFinite,
                      "optimize_pixels_cal: non-finite loss at step " + std::to_string(step));
      if (!pcfg.monotone || value <= current.value) {
        res.image = std::move(trial);
        current = cal_loss(res.image, reference, cfg);
        break;
      }
      lr *= 0.5;
    }
    res.trajectory.push_back(current.value);
  }
  return res;
}

}  // namespace calflow
