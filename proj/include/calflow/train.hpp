#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "calflow/dataset.hpp"
#include "calflow/error.hpp"
#include "calflow/flow.hpp"
#include "calflow/losses.hpp"
#include "calflow/optim.hpp"

namespace calflow {

/// Unit of the likelihood term inside the training objective.
enum class NllNormalization { PerImage, PerDimension };

inline const char* to_string(NllNormalization n) {
  return n == NllNormalization::PerImage ? "image" : "dim";
}

struct TrainConfig {
  std::size_t patch_size = 64;
  std::size_t batch_size = 8;
  std::size_t max_steps = 1000;
  double lambda = 0.01;
  std::uint64_t seed = 0;
  std::size_t log_every = 1;
  double lr = 1e-4;
  std::size_t bins = 64;
  /// Adds U[0, 1/255) noise to the reference before the likelihood term.
  bool dequantize = true;
  /// PerDimension divides the NLL by the patch element count (nats per
  /// dimension) so lambda * CAL is not swamped on large patches.
  NllNormalization nll_normalization = NllNormalization::PerImage;
};

/// Batch means of one logged step.
struct CurveRow {
  std::size_t step = 0;
  double nll = 0.0;
  double cal = 0.0;
  double total = 0.0;
};

template <typename T>
struct TrainResult {
  ConditionalFlow<T> flow;
  std::vector<CurveRow> curve;
};

inline void write_curve_csv(std::span<const CurveRow> curve, const std::filesystem::path& path) {
  std::ofstream out(path);
  detail::require(static_cast<bool>(out), ErrorCode::WriteFailed,
                  "cannot open " + path.string() + " for writing");
  out << "step,nll,cal,total\n";
  char buf[128];
  for (const auto& r : curve) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g\n", r.step, r.nll, r.cal, r.total);
    out << buf;
  }
  detail::require(static_cast<bool>(out), ErrorCode::WriteFailed, "failed writing " + path.string());
}

template <typename T>
std::vector<std::pair<BasicImage<T>, BasicImage<T>>> as_flow_batch(std::span<const ImagePair> pairs) {
  std::vector<std::pair<BasicImage<T>, BasicImage<T>>> out;
  for (const auto& p : pairs) out.emplace_back(image_cast<T>(p.ref), image_cast<T>(p.low));
  return out;
}

/// Minimizes the batch mean of nll + lambda * CAL with Adam.
///
/// One seeded generator drives patch sampling and dequantization noise, so a
/// fixed seed and config reproduce the loss curve and parameters bit for
/// bit. Curve values are in the objective's units (see nll_normalization).
/// If the flow's actnorm is uninitialized it is initialized from the
/// first sampled batch. Row k of the curve is the batch evaluated before
/// update k; a final row at max_steps is evaluated after the last update.
template <typename T>
TrainResult<T> train_flow(std::span<const ImagePair> dataset, ConditionalFlow<T> flow,
                          const TrainConfig& cfg,
                          const std::function<void(const CurveRow&)>& on_log = {}) {
  detail::require(!dataset.empty(), ErrorCode::EmptyInput, "train_flow: empty dataset");
  detail::require(cfg.patch_size % FlowConfig::squeeze_factor == 0, ErrorCode::InvalidArgument,
                  "train_flow: patch size must be divisible by 2");
  detail::require(cfg.batch_size > 0 && cfg.log_every > 0, ErrorCode::InvalidArgument,
                  "train_flow: batch size and log interval must be > 0");
  detail::require(cfg.lambda >= 0.0, ErrorCode::InvalidArgument, "train_flow: lambda must be >= 0");

  Rng rng(cfg.seed);
  if (!flow.actnorm_initialized()) {
    const auto first = sample_patches(dataset, cfg.patch_size, cfg.batch_size, rng);
    const auto batch = as_flow_batch<T>(first);
    flow.init_actnorm(batch);
  }

  LossConfig lcfg = LossConfig::with_grid(make_grid(0.0, 1.0, cfg.bins), cfg.lambda);
  OptimizerState opt;
  opt.method = OptimizerMethod::Adam;
  opt.lr = cfg.lr;
  std::uniform_real_distribution<double> dequant(0.0, 1.0 / 255.0);
  std::vector<T> grad(flow.param_count());
  TrainResult<T> result{flow, {}};
  ConditionalFlow<T>& f = result.flow;

  auto run_batch = [&](std::size_t step, bool update) {
    const auto patches = sample_patches(dataset, cfg.patch_size, cfg.batch_size, rng);
    std::fill(grad.begin(), grad.end(), T(0));
    const T weight = T(1) / static_cast<T>(patches.size());
    const T nll_weight = cfg.nll_normalization == NllNormalization::PerDimension
                             ? T(1) / static_cast<T>(patches.front().ref.size())
                             : T(1);
    CurveRow row{step, 0.0, 0.0, 0.0};
    for (const auto& p : patches) {
      const auto low = image_cast<T>(p.low);
      const auto ref = image_cast<T>(p.ref);
      auto target = ref;
      if (cfg.dequantize)
        for (auto& v : target.data()) v += static_cast<T>(dequant(rng));
      LossReport r;
      if (update) {
        r = total_loss_with_grad(low, ref, target, f, lcfg, std::span<T>(grad), weight, nll_weight);
      } else {
        const auto cal = cal_loss(f.enhance(low, 0.0), ref, lcfg, false);
        r = cal_report(cal.value, cal.per_channel_w1, lcfg.lambda,
                       static_cast<double>(nll_weight) * f.nll(target, low));
      }
      row.nll += *r.nll / static_cast<double>(patches.size());
      row.cal += r.cal / static_cast<double>(patches.size());
      row.total += r.total / static_cast<double>(patches.size());
    }
    if (!std::isfinite(row.total) || !std::isfinite(row.nll) || !std::isfinite(row.cal))
      detail::fail(ErrorCode::NonFinite, "train_flow: non-finite loss at step " + std::to_string(step) +
                                             " (nll " + std::to_string(row.nll) + ", cal " +
                                             std::to_string(row.cal) + ")");
    if (step % cfg.log_every == 0 || !update) {
      result.curve.push_back(row);
      if (on_log) on_log(row);
    }
    if (update) adam_step(f.params(), std::span<const T>(grad), opt, std::span<const ParamBlock>(f.layout()));
  };

  for (std::size_t step = 0; step < cfg.max_steps; ++step) run_batch(step, true);
  run_batch(cfg.max_steps, false);
  return result;
}

}  // namespace calflow
