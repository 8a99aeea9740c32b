#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "calflow/error.hpp"
#include "calflow/flow.hpp"
#include "calflow/histogram.hpp"
#include "calflow/image.hpp"
#include "calflow/transport.hpp"

namespace calflow {

enum class ChannelReduction { Sum, Mean };

struct LossConfig {
  double lambda = 0.01;
  HistogramGrid grid = make_grid(0.0, 1.0, 64);
  KernelConfig kernel = KernelConfig::for_grid(make_grid(0.0, 1.0, 64));
  ChannelReduction reduction = ChannelReduction::Sum;

  static LossConfig with_grid(HistogramGrid grid, double lambda = 0.01) {
    LossConfig cfg;
    cfg.lambda = lambda;
    cfg.grid = grid;
    cfg.kernel = KernelConfig::for_grid(grid);
    return cfg;
  }
};

struct LossReport {
  /// Absent when no flow was involved (CAL-only evaluation).
  std::optional<double> nll;
  double cal = 0.0;
  double total = 0.0;
  double lambda = 0.0;
  std::array<double, 3> per_channel_w1{};
};

inline nlohmann::json to_json(const LossReport& r) {
  nlohmann::json j;
  j["nll"] = r.nll ? nlohmann::json(*r.nll) : nlohmann::json(nullptr);
  j["cal"] = r.cal;
  j["total"] = r.total;
  j["lambda"] = r.lambda;
  j["w1_r"] = r.per_channel_w1[0];
  j["w1_g"] = r.per_channel_w1[1];
  j["w1_b"] = r.per_channel_w1[2];
  return j;
}

template <typename T>
struct CalResult {
  double value = 0.0;
  std::array<double, 3> per_channel_w1{};
  /// d value / d restored pixels.
  BasicImage<T> grad;
};

/// Color alignment loss: per-channel W1 between soft histograms of the
/// restored and reference images, reduced over channels. Gradient flows to
/// the restored image only.
template <typename T>
CalResult<T> cal_loss(const BasicImage<T>& restored, const BasicImage<T>& reference,
                      const LossConfig& cfg, bool with_grad = true) {
  require_same_shape(restored, reference, "cal_loss");
  detail::require(restored.channels() == 3, ErrorCode::ShapeMismatch,
                  "cal_loss expects 3-channel images, got " + restored.shape_string());
  detail::require(!restored.empty(), ErrorCode::EmptyInput, "cal_loss: empty images");
  const double weight = cfg.reduction == ChannelReduction::Mean ? 1.0 / 3.0 : 1.0;

  CalResult<T> res;
  if (with_grad) res.grad = BasicImage<T>(restored.channels(), restored.height(), restored.width());
  for (std::size_t c = 0; c < 3; ++c) {
    const auto h1 = soft_hist(restored.plane(c), cfg.grid, cfg.kernel);
    const auto h2 = soft_hist(reference.plane(c), cfg.grid, cfg.kernel);
    auto tr = w1_cdf(h1, h2);
    res.per_channel_w1[c] = tr.distance;
    res.value += weight * tr.distance;
    if (!with_grad) continue;
    for (auto& g : tr.grad_first) g *= weight;
    const auto g = soft_hist_backward(restored.plane(c), cfg.grid, cfg.kernel,
                                      std::span<const double>(tr.grad_first));
    std::copy(g.begin(), g.end(), res.grad.plane(c).begin());
  }
  return res;
}

inline LossReport cal_report(double cal, const std::array<double, 3>& w1, double lambda,
                             std::optional<double> nll) {
  LossReport r;
  r.nll = nll;
  r.cal = cal;
  r.lambda = lambda;
  r.per_channel_w1 = w1;
  r.total = nll.value_or(0.0) + lambda * cal;
  return r;
}

/// Joint objective nll(reference | low) + lambda * CAL(enhance(low, 0), reference).
template <typename T>
LossReport total_loss(const BasicImage<T>& low, const BasicImage<T>& reference,
                      const ConditionalFlow<T>& flow, const LossConfig& cfg) {
  detail::require(cfg.lambda >= 0.0, ErrorCode::InvalidArgument, "lambda must be >= 0");
  const double nll = flow.nll(reference, low);
  const auto restored = flow.enhance(low, 0.0);
  const auto cal = cal_loss(restored, reference, cfg, false);
  return cal_report(cal.value, cal.per_channel_w1, cfg.lambda, nll);
}

/// total_loss plus its parameter gradient, accumulated into `grad` with
/// weight `scale`. `dequantized_reference` is the (optionally noised)
/// target used for the likelihood term. The NLL term (value and gradient)
/// is multiplied by `nll_weight`.
template <typename T>
LossReport total_loss_with_grad(const BasicImage<T>& low, const BasicImage<T>& reference,
                                const BasicImage<T>& dequantized_reference,
                                const ConditionalFlow<T>& flow, const LossConfig& cfg,
                                std::span<T> grad, T scale = T(1), T nll_weight = T(1)) {
  detail::require(cfg.lambda >= 0.0, ErrorCode::InvalidArgument, "lambda must be >= 0");
  const double nll =
      static_cast<double>(nll_weight) * flow.nll_with_grad(dequantized_reference, low, grad, scale * nll_weight);
  const auto restored = flow.enhance(low, 0.0);
  const bool need_cal_grad = cfg.lambda > 0.0;
  auto cal = cal_loss(restored, reference, cfg, need_cal_grad);
  if (need_cal_grad) {
    for (auto& v : cal.grad.data()) v *= static_cast<T>(cfg.lambda) * scale;
    flow.enhance_vjp(low, cal.grad, grad);
  }
  return cal_report(cal.value, cal.per_channel_w1, cfg.lambda, nll);
}

}  // namespace calflow
