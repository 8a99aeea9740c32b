#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "calflow/error.hpp"
#include "calflow/image.hpp"
#include "calflow/nn.hpp"

namespace calflow {

using Rng = std::mt19937_64;

struct FlowConfig {
  std::size_t steps = 4;
  std::size_t hidden = 16;
  std::size_t cond_channels = 8;
  /// When false every step is actnorm + channel reversal only.
  bool coupling = true;

  static constexpr std::size_t image_channels = 3;
  static constexpr std::size_t squeeze_factor = 2;
  static constexpr std::size_t latent_channels = image_channels * squeeze_factor * squeeze_factor;
  static constexpr std::size_t half_channels = latent_channels / 2;

  friend bool operator==(const FlowConfig&, const FlowConfig&) = default;
};

/// Named slice of the flat parameter vector.
struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
};

template <typename T>
struct LatentOutput {
  BasicImage<T> z;
  /// log |det dz/dy| in nats, summed over all layers.
  double log_det = 0.0;
  /// Per-layer contributions in application order (actnorm, reversal, coupling, ...).
  std::vector<double> layer_log_dets;
};

/// Toy conditional normalizing flow z = flow(y; x).
///
/// y (3 x H x W) is squeezed to 12 x H/2 x W/2 and passed through N steps of
/// actnorm -> channel reversal -> conditional affine coupling. The coupling
/// scales the second half of the channels by exp(log s) and shifts by t, where
/// (log s, t) come from a two-layer conv subnet fed with the first half and
/// the step's condition features. Condition features come from a shared
/// three-layer conv encoder over squeeze(x) with one head per step.
///
/// Coupling scales use log s = 2 tanh(raw / 2), so every layer is invertible
/// with a bounded log-determinant.
template <typename T>
class ConditionalFlow {
 public:
  explicit ConditionalFlow(FlowConfig config = {}) : config_(config) { build_layout(); }

  const FlowConfig& config() const noexcept { return config_; }
  std::size_t param_count() const noexcept { return params_.size(); }
  std::span<T> params() noexcept { return params_; }
  std::span<const T> params() const noexcept { return params_; }
  const std::vector<ParamBlock>& layout() const noexcept { return layout_; }

  std::span<T> block(const std::string& name) {
    for (const auto& b : layout_)
      if (b.name == name) return std::span<T>(params_).subspan(b.offset, b.size);
    detail::fail(ErrorCode::InvalidArgument, "no parameter block named " + name);
  }

  bool actnorm_initialized() const noexcept { return actnorm_initialized_; }
  /// For checkpoint loading and hand-set parameters.
  void set_actnorm_initialized(bool v) noexcept { actnorm_initialized_ = v; }

  /// Gaussian weights with std scale / sqrt(fan_in), zero biases, actnorm at
  /// identity. With `zero_last_coupling` the final coupling conv starts at
  /// zero so each coupling is the identity before training.
  void init_random(Rng& rng, double scale = 1.0, bool zero_last_coupling = true) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::fill(params_.begin(), params_.end(), T(0));
    auto init_conv = [&](const nn::Conv3x3& c, double s) {
      const double std_dev = s / std::sqrt(static_cast<double>(c.in * 9));
      for (std::size_t i = 0; i < c.weight_count(); ++i)
        params_[c.offset + i] = static_cast<T>(std_dev * normal(rng));
    };
    for (const auto& c : encoder_) init_conv(c, scale);
    for (const auto& c : heads_) init_conv(c, scale);
    for (const auto& st : steps_) {
      init_conv(st.sub1, scale);
      if (!zero_last_coupling) init_conv(st.sub2, scale);
    }
  }

  // ---------------------------------------------------------------- forward

  LatentOutput<T> forward(const BasicImage<T>& y, const BasicImage<T>& x) const {
    check_inputs(y, x);
    const Encoding enc = encode(x);
    LatentOutput<T> out;
    out.z = nn::squeeze(y);
    for (std::size_t n = 0; n < steps_.size(); ++n) {
      const double an = actnorm_forward(n, out.z);
      out.z = nn::reverse_channels(out.z);
      out.layer_log_dets.push_back(an);
      out.layer_log_dets.push_back(0.0);
      if (config_.coupling) {
        const double cl = coupling_forward(n, out.z, enc.conds[n], nullptr);
        out.layer_log_dets.push_back(cl);
      }
    }
    for (double v : out.layer_log_dets) out.log_det += v;
    return out;
  }

  BasicImage<T> inverse(const BasicImage<T>& z, const BasicImage<T>& x) const {
    require_initialized();
    detail::require(z.channels() == FlowConfig::latent_channels &&
                        z.height() * 2 == x.height() && z.width() * 2 == x.width(),
                    ErrorCode::ShapeMismatch,
                    "inverse: latent " + z.shape_string() + " incompatible with condition " +
                        x.shape_string());
    const Encoding enc = encode(x);
    BasicImage<T> cur = z;
    for (std::size_t n = steps_.size(); n-- > 0;) {
      if (config_.coupling) coupling_inverse(n, cur, enc.conds[n], nullptr);
      cur = nn::reverse_channels(cur);
      actnorm_inverse(n, cur);
    }
    return nn::unsqueeze(cur);
  }

  /// -log f_z(z) - log|det|, standard normal prior, nats per image.
  double nll(const BasicImage<T>& y, const BasicImage<T>& x) const {
    const auto out = forward(y, x);
    return gaussian_nll(out.z) - out.log_det;
  }

  static double gaussian_nll(const BasicImage<T>& z) {
    const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
    double acc = 0.0;
    for (T v : z.data()) acc += 0.5 * static_cast<double>(v) * static_cast<double>(v);
    return acc + half_log_2pi * static_cast<double>(z.size());
  }

  /// NLL plus its parameter gradient, accumulated (+=) into `grad` with
  /// weight `scale`.
  double nll_with_grad(const BasicImage<T>& y, const BasicImage<T>& x, std::span<T> grad,
                       T scale = T(1)) const {
    check_inputs(y, x);
    check_grad(grad);
    const Encoding enc = encode(x);
    std::vector<ForwardCache> caches(steps_.size());
    BasicImage<T> cur = nn::squeeze(y);
    double log_det = 0.0;
    for (std::size_t n = 0; n < steps_.size(); ++n) {
      log_det += actnorm_forward(n, cur);
      caches[n].actnorm_out = cur;
      cur = nn::reverse_channels(cur);
      if (config_.coupling) log_det += coupling_forward(n, cur, enc.conds[n], &caches[n].coupling);
    }
    const double value = gaussian_nll(cur) - log_det;

    // dL/dz = z, dL/dlogdet = -1, both scaled.
    BasicImage<T> g = cur;
    for (auto& v : g.data()) v *= scale;
    const T g_logdet = -scale;
    std::vector<BasicImage<T>> g_conds(steps_.size());
    for (std::size_t n = steps_.size(); n-- > 0;) {
      if (config_.coupling)
        coupling_forward_backward(n, caches[n].coupling, enc.conds[n], g, g_logdet, g_conds[n], grad);
      g = nn::reverse_channels(g);
      actnorm_forward_backward(n, caches[n].actnorm_out, g, g_logdet, grad);
    }
    encoder_backward(enc, g_conds, grad);
    return value;
  }

  /// Samples y = inverse(tau * eps; x). tau = 0 is the deterministic mode and
  /// needs no generator.
  BasicImage<T> enhance(const BasicImage<T>& x, double tau = 0.0, Rng* rng = nullptr) const {
    detail::require(tau >= 0.0 && std::isfinite(tau), ErrorCode::InvalidArgument,
                    "enhance: temperature must be >= 0");
    detail::require(x.channels() == FlowConfig::image_channels, ErrorCode::ShapeMismatch,
                    "enhance: condition must have 3 channels");
    BasicImage<T> z(FlowConfig::latent_channels, x.height() / 2, x.width() / 2);
    if (tau > 0.0) {
      detail::require(rng != nullptr, ErrorCode::InvalidArgument,
                      "enhance: tau > 0 needs a random generator");
      std::normal_distribution<double> normal(0.0, 1.0);
      for (auto& v : z.data()) v = static_cast<T>(tau * normal(*rng));
    }
    detail::require(x.height() % 2 == 0 && x.width() % 2 == 0, ErrorCode::InvalidArgument,
                    "enhance: spatial size must be divisible by 2");
    return inverse(z, x);
  }

  /// Accumulates d<upstream, enhance(x, 0)>/dparams into `grad`.
  void enhance_vjp(const BasicImage<T>& x, const BasicImage<T>& upstream, std::span<T> grad) const {
    require_initialized();
    check_grad(grad);
    detail::require(x.channels() == FlowConfig::image_channels && upstream.same_shape(x),
                    ErrorCode::ShapeMismatch, "enhance_vjp: upstream must match condition shape");
    const Encoding enc = encode(x);
    std::vector<InverseCache> caches(steps_.size());
    BasicImage<T> cur(FlowConfig::latent_channels, x.height() / 2, x.width() / 2);
    for (std::size_t n = steps_.size(); n-- > 0;) {
      if (config_.coupling) coupling_inverse(n, cur, enc.conds[n], &caches[n].coupling);
      cur = nn::reverse_channels(cur);
      actnorm_inverse(n, cur);
      caches[n].actnorm_in = cur;
    }

    BasicImage<T> g = nn::squeeze(upstream);
    std::vector<BasicImage<T>> g_conds(steps_.size());
    for (std::size_t n = 0; n < steps_.size(); ++n) {
      actnorm_inverse_backward(n, caches[n].actnorm_in, g, grad);
      g = nn::reverse_channels(g);
      if (config_.coupling)
        coupling_inverse_backward(n, caches[n].coupling, enc.conds[n], g, g_conds[n], grad);
    }
    encoder_backward(enc, g_conds, grad);
  }

  /// Data-dependent actnorm initialization: each step's actnorm is set so
  /// its output has zero mean and unit variance per channel over the batch.
  void init_actnorm(std::span<const std::pair<BasicImage<T>, BasicImage<T>>> batch) {
    detail::require(!actnorm_initialized_, ErrorCode::AlreadyInitialized,
                    "init_actnorm: actnorm is already initialized");
    detail::require(!batch.empty(), ErrorCode::EmptyInput, "init_actnorm: empty batch");
    std::vector<BasicImage<T>> cur;
    std::vector<Encoding> encs;
    for (const auto& [y, x] : batch) {
      check_shapes(y, x);
      cur.push_back(nn::squeeze(y));
      encs.push_back(encode(x));
    }
    constexpr std::size_t C = FlowConfig::latent_channels;
    for (std::size_t n = 0; n < steps_.size(); ++n) {
      std::vector<double> sum(C, 0.0), sum_sq(C, 0.0);
      double count = 0.0;
      for (const auto& t : cur) {
        for (std::size_t c = 0; c < C; ++c)
          for (T v : t.plane(c)) sum[c] += static_cast<double>(v);
        count += static_cast<double>(t.plane_size());
      }
      std::vector<double> mean(C);
      for (std::size_t c = 0; c < C; ++c) mean[c] = sum[c] / count;
      for (const auto& t : cur)
        for (std::size_t c = 0; c < C; ++c)
          for (T v : t.plane(c)) {
            const double d = static_cast<double>(v) - mean[c];
            sum_sq[c] += d * d;
          }
      T* shift = params_.data() + steps_[n].actnorm_shift;
      T* log_scale = params_.data() + steps_[n].actnorm_log_scale;
      for (std::size_t c = 0; c < C; ++c) {
        const double sd = std::sqrt(sum_sq[c] / count);
        shift[c] = static_cast<T>(-mean[c]);
        log_scale[c] = static_cast<T>(-std::log(std::max(sd, kActnormStdFloor)));
      }
      for (std::size_t i = 0; i < cur.size(); ++i) {
        actnorm_forward(n, cur[i]);
        cur[i] = nn::reverse_channels(cur[i]);
        if (config_.coupling) coupling_forward(n, cur[i], encs[i].conds[n], nullptr);
      }
    }
    actnorm_initialized_ = true;
  }

  static constexpr double kActnormStdFloor = 1e-6;

 private:
  struct StepLayout {
    std::size_t actnorm_shift = 0;
    std::size_t actnorm_log_scale = 0;
    nn::Conv3x3 sub1;
    nn::Conv3x3 sub2;
  };

  struct Encoding {
    BasicImage<T> input;
    std::vector<BasicImage<T>> acts;  // post-tanh trunk activations
    std::vector<BasicImage<T>> conds;
  };

  struct CouplingCache {
    BasicImage<T> cat;
    BasicImage<T> hidden;
    BasicImage<T> raw;
    BasicImage<T> zb;  // untransformed half (forward) or output half (inverse)
  };

  struct ForwardCache {
    BasicImage<T> actnorm_out;
    CouplingCache coupling;
  };

  struct InverseCache {
    BasicImage<T> actnorm_in;
    CouplingCache coupling;
  };

  void build_layout() {
    constexpr std::size_t C = FlowConfig::latent_channels;
    constexpr std::size_t half = FlowConfig::half_channels;
    const std::size_t H = config_.hidden;
    std::size_t offset = 0;
    auto add = [&](std::string name, std::size_t size) {
      layout_.push_back({std::move(name), offset, size});
      offset += size;
      return offset - size;
    };
    auto add_conv = [&](const std::string& name, std::size_t in, std::size_t out) {
      nn::Conv3x3 c{in, out, 0};
      c.offset = add(name + ".weight", c.weight_count());
      add(name + ".bias", out);
      return c;
    };
    if (config_.steps > 0 && config_.coupling) {
      encoder_.push_back(add_conv("encoder.0", C, H));
      encoder_.push_back(add_conv("encoder.1", H, H));
      encoder_.push_back(add_conv("encoder.2", H, H));
      for (std::size_t n = 0; n < config_.steps; ++n)
        heads_.push_back(add_conv("encoder.head" + std::to_string(n), H, config_.cond_channels));
    }
    for (std::size_t n = 0; n < config_.steps; ++n) {
      const std::string p = "step" + std::to_string(n);
      StepLayout st;
      st.actnorm_shift = add(p + ".actnorm.shift", C);
      st.actnorm_log_scale = add(p + ".actnorm.log_scale", C);
      if (config_.coupling) {
        st.sub1 = add_conv(p + ".coupling.conv1", half + config_.cond_channels, H);
        st.sub2 = add_conv(p + ".coupling.conv2", H, C);
      }
      steps_.push_back(st);
    }
    params_.assign(offset, T(0));
    actnorm_initialized_ = config_.steps == 0;
  }

  void require_initialized() const {
    detail::require(actnorm_initialized_, ErrorCode::NotInitialized,
                    "flow actnorm is not initialized");
  }

  void check_shapes(const BasicImage<T>& y, const BasicImage<T>& x) const {
    detail::require(y.channels() == FlowConfig::image_channels &&
                        x.channels() == FlowConfig::image_channels,
                    ErrorCode::ShapeMismatch, "flow inputs must have 3 channels");
    require_same_shape(y, x, "flow");
    detail::require(y.height() % 2 == 0 && y.width() % 2 == 0 && !y.empty(),
                    ErrorCode::InvalidArgument,
                    "flow input size " + y.shape_string() + " is not divisible by 2");
  }

  void check_inputs(const BasicImage<T>& y, const BasicImage<T>& x) const {
    require_initialized();
    check_shapes(y, x);
  }

  void check_grad(std::span<T> grad) const {
    detail::require(grad.size() == params_.size(), ErrorCode::ShapeMismatch,
                    "gradient buffer has " + std::to_string(grad.size()) + " entries, flow has " +
                        std::to_string(params_.size()));
  }

  Encoding encode(const BasicImage<T>& x) const {
    Encoding e;
    if (encoder_.empty()) return e;
    e.input = nn::squeeze(x);
    const BasicImage<T>* prev = &e.input;
    for (const auto& c : encoder_) {
      e.acts.push_back(nn::conv_forward<T>(c, params_, *prev));
      nn::tanh_inplace(e.acts.back());
      prev = &e.acts.back();
    }
    for (const auto& h : heads_) e.conds.push_back(nn::conv_forward<T>(h, params_, *prev));
    return e;
  }

  void encoder_backward(const Encoding& e, std::vector<BasicImage<T>>& g_conds,
                        std::span<T> grad) const {
    if (encoder_.empty()) return;
    BasicImage<T> g_top(e.acts.back().channels(), e.acts.back().height(), e.acts.back().width());
    bool any = false;
    for (std::size_t n = 0; n < heads_.size(); ++n) {
      if (g_conds[n].empty()) continue;
      any = true;
      BasicImage<T> gx;
      nn::conv_backward<T>(heads_[n], params_, e.acts.back(), g_conds[n], grad, &gx);
      for (std::size_t i = 0; i < gx.size(); ++i) g_top.data()[i] += gx.data()[i];
    }
    if (!any) return;
    BasicImage<T> g = std::move(g_top);
    for (std::size_t l = encoder_.size(); l-- > 0;) {
      nn::tanh_backward_inplace(e.acts[l], g);
      const BasicImage<T>& in = l == 0 ? e.input : e.acts[l - 1];
      BasicImage<T> gx;
      nn::conv_backward<T>(encoder_[l], params_, in, g, grad, l == 0 ? nullptr : &gx);
      g = std::move(gx);
    }
  }

  // out = (in + shift) * exp(log_scale); returns H*W*sum(log_scale).
  double actnorm_forward(std::size_t n, BasicImage<T>& z) const {
    const T* shift = params_.data() + steps_[n].actnorm_shift;
    const T* log_scale = params_.data() + steps_[n].actnorm_log_scale;
    double ld = 0.0;
    for (std::size_t c = 0; c < z.channels(); ++c) {
      const T s = std::exp(log_scale[c]);
      for (auto& v : z.plane(c)) v = (v + shift[c]) * s;
      ld += static_cast<double>(log_scale[c]);
    }
    return ld * static_cast<double>(z.plane_size());
  }

  void actnorm_inverse(std::size_t n, BasicImage<T>& z) const {
    const T* shift = params_.data() + steps_[n].actnorm_shift;
    const T* log_scale = params_.data() + steps_[n].actnorm_log_scale;
    for (std::size_t c = 0; c < z.channels(); ++c) {
      const T inv = std::exp(-log_scale[c]);
      for (auto& v : z.plane(c)) v = v * inv - shift[c];
    }
  }

  // g holds dL/d(actnorm output) on entry and dL/d(actnorm input) on exit.
  void actnorm_forward_backward(std::size_t n, const BasicImage<T>& out, BasicImage<T>& g,
                                T g_logdet, std::span<T> grad) const {
    const T* log_scale = params_.data() + steps_[n].actnorm_log_scale;
    T* g_shift = grad.data() + steps_[n].actnorm_shift;
    T* g_log_scale = grad.data() + steps_[n].actnorm_log_scale;
    for (std::size_t c = 0; c < g.channels(); ++c) {
      const T s = std::exp(log_scale[c]);
      auto gp = g.plane(c);
      auto op = out.plane(c);
      T sum_go = 0, sum_in = 0;
      for (std::size_t i = 0; i < gp.size(); ++i) {
        sum_go += gp[i] * op[i];
        gp[i] *= s;
        sum_in += gp[i];
      }
      g_shift[c] += sum_in;
      g_log_scale[c] += sum_go + g_logdet * static_cast<T>(gp.size());
    }
  }

  // in = out * exp(-log_scale) - shift. g holds dL/d(in) on entry and
  // dL/d(out) on exit.
  void actnorm_inverse_backward(std::size_t n, const BasicImage<T>& in, BasicImage<T>& g,
                                std::span<T> grad) const {
    const T* shift = params_.data() + steps_[n].actnorm_shift;
    const T* log_scale = params_.data() + steps_[n].actnorm_log_scale;
    T* g_shift = grad.data() + steps_[n].actnorm_shift;
    T* g_log_scale = grad.data() + steps_[n].actnorm_log_scale;
    for (std::size_t c = 0; c < g.channels(); ++c) {
      const T inv = std::exp(-log_scale[c]);
      auto gp = g.plane(c);
      auto ip = in.plane(c);
      T sum_g = 0, sum_gx = 0;
      for (std::size_t i = 0; i < gp.size(); ++i) {
        sum_g += gp[i];
        sum_gx += gp[i] * (ip[i] + shift[c]);
        gp[i] *= inv;
      }
      g_shift[c] -= sum_g;
      g_log_scale[c] -= sum_gx;
    }
  }

  // Runs the coupling subnet on [z_a, cond] and returns raw (log s, t) output.
  BasicImage<T> coupling_subnet(std::size_t n, const BasicImage<T>& za, const BasicImage<T>& cond,
                                CouplingCache* cache) const {
    BasicImage<T> cat = nn::concat_channels(za, cond);
    BasicImage<T> hidden = nn::conv_forward<T>(steps_[n].sub1, params_, cat);
    nn::tanh_inplace(hidden);
    BasicImage<T> raw = nn::conv_forward<T>(steps_[n].sub2, params_, hidden);
    if (cache) {
      cache->cat = std::move(cat);
      cache->hidden = std::move(hidden);
      cache->raw = raw;
    }
    return raw;
  }

  static T bounded_log_scale(T raw) { return T(2) * std::tanh(raw / T(2)); }

  // Backprop dL/draw through the subnet; adds z_a gradient into g_za and
  // stores the condition gradient.
  void coupling_subnet_backward(std::size_t n, const CouplingCache& cache, const BasicImage<T>& g_raw,
                                BasicImage<T>& g_za, BasicImage<T>& g_cond, std::span<T> grad) const {
    constexpr std::size_t half = FlowConfig::half_channels;
    BasicImage<T> g_hidden;
    nn::conv_backward<T>(steps_[n].sub2, params_, cache.hidden, g_raw, grad, &g_hidden);
    nn::tanh_backward_inplace(cache.hidden, g_hidden);
    BasicImage<T> g_cat;
    nn::conv_backward<T>(steps_[n].sub1, params_, cache.cat, g_hidden, grad, &g_cat);
    const std::size_t plane = g_cat.plane_size();
    for (std::size_t i = 0; i < half * plane; ++i) g_za.data()[i] += g_cat.data()[i];
    g_cond = nn::channel_slice(g_cat, half, g_cat.channels() - half);
  }

  double coupling_forward(std::size_t n, BasicImage<T>& z, const BasicImage<T>& cond,
                          CouplingCache* cache) const {
    constexpr std::size_t half = FlowConfig::half_channels;
    const BasicImage<T> za = nn::channel_slice(z, 0, half);
    const BasicImage<T> raw = coupling_subnet(n, za, cond, cache);
    if (cache) cache->zb = nn::channel_slice(z, half, half);
    const std::size_t plane = z.plane_size();
    double ld = 0.0;
    for (std::size_t i = 0; i < half * plane; ++i) {
      const T ls = bounded_log_scale(raw.data()[i]);
      const T t = raw.data()[half * plane + i];
      T& v = z.data()[half * plane + i];
      v = v * std::exp(ls) + t;
      ld += static_cast<double>(ls);
    }
    return ld;
  }

  void coupling_inverse(std::size_t n, BasicImage<T>& z, const BasicImage<T>& cond,
                        CouplingCache* cache) const {
    constexpr std::size_t half = FlowConfig::half_channels;
    const BasicImage<T> za = nn::channel_slice(z, 0, half);
    const BasicImage<T> raw = coupling_subnet(n, za, cond, cache);
    const std::size_t plane = z.plane_size();
    for (std::size_t i = 0; i < half * plane; ++i) {
      const T ls = bounded_log_scale(raw.data()[i]);
      const T t = raw.data()[half * plane + i];
      T& v = z.data()[half * plane + i];
      v = (v - t) * std::exp(-ls);
    }
    if (cache) cache->zb = nn::channel_slice(z, half, half);
  }

  // g: dL/d(coupling output) on entry, dL/d(coupling input) on exit.
  void coupling_forward_backward(std::size_t n, const CouplingCache& cache, const BasicImage<T>& cond,
                                 BasicImage<T>& g, T g_logdet, BasicImage<T>& g_cond,
                                 std::span<T> grad) const {
    (void)cond;
    constexpr std::size_t half = FlowConfig::half_channels;
    const std::size_t plane = g.plane_size();
    BasicImage<T> g_raw(cache.raw.channels(), cache.raw.height(), cache.raw.width());
    for (std::size_t i = 0; i < half * plane; ++i) {
      const T r = cache.raw.data()[i];
      const T th = std::tanh(r / T(2));
      const T s = std::exp(T(2) * th);
      const T gout = g.data()[half * plane + i];
      const T g_ls = gout * cache.zb.data()[i] * s + g_logdet;
      g_raw.data()[i] = g_ls * (T(1) - th * th);
      g_raw.data()[half * plane + i] = gout;
      g.data()[half * plane + i] = gout * s;
    }
    BasicImage<T> g_za = nn::channel_slice(g, 0, half);
    coupling_subnet_backward(n, cache, g_raw, g_za, g_cond, grad);
    std::copy(g_za.data().begin(), g_za.data().end(), g.data().begin());
  }

  // g: dL/d(inverse output) on entry, dL/d(inverse input) on exit.
  void coupling_inverse_backward(std::size_t n, const CouplingCache& cache, const BasicImage<T>& cond,
                                 BasicImage<T>& g, BasicImage<T>& g_cond, std::span<T> grad) const {
    (void)cond;
    constexpr std::size_t half = FlowConfig::half_channels;
    const std::size_t plane = g.plane_size();
    BasicImage<T> g_raw(cache.raw.channels(), cache.raw.height(), cache.raw.width());
    for (std::size_t i = 0; i < half * plane; ++i) {
      const T r = cache.raw.data()[i];
      const T th = std::tanh(r / T(2));
      const T inv = std::exp(-T(2) * th);
      const T gout = g.data()[half * plane + i];
      const T g_ls = -gout * cache.zb.data()[i];
      g_raw.data()[i] = g_ls * (T(1) - th * th);
      g_raw.data()[half * plane + i] = -gout * inv;
      g.data()[half * plane + i] = gout * inv;
    }
    BasicImage<T> g_za = nn::channel_slice(g, 0, half);
    coupling_subnet_backward(n, cache, g_raw, g_za, g_cond, grad);
    std::copy(g_za.data().begin(), g_za.data().end(), g.data().begin());
  }

  FlowConfig config_;
  std::vector<ParamBlock> layout_;
  std::vector<nn::Conv3x3> encoder_;
  std::vector<nn::Conv3x3> heads_;
  std::vector<StepLayout> steps_;
  std::vector<T> params_;
  bool actnorm_initialized_ = false;
};

// ---------------------------------------------------------------- checkpoints

inline constexpr const char* kCheckpointFormat = "calflow.flow";
inline constexpr int kCheckpointVersion = 1;

template <typename T>
nlohmann::json checkpoint_json(const ConditionalFlow<T>& flow) {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["config"] = {{"steps", flow.config().steps},
                 {"hidden", flow.config().hidden},
                 {"cond_channels", flow.config().cond_channels},
                 {"coupling", flow.config().coupling}};
  j["actnorm_initialized"] = flow.actnorm_initialized();
  j["param_count"] = flow.param_count();
  std::vector<double> p(flow.params().begin(), flow.params().end());
  j["params"] = std::move(p);
  return j;
}

template <typename T>
void save_checkpoint(const ConditionalFlow<T>& flow, const std::filesystem::path& path) {
  std::ofstream out(path);
  detail::require(static_cast<bool>(out), ErrorCode::WriteFailed,
                  "cannot open " + path.string() + " for writing");
  out << checkpoint_json(flow).dump() << '\n';
  detail::require(static_cast<bool>(out), ErrorCode::WriteFailed, "failed writing " + path.string());
}

template <typename T>
ConditionalFlow<T> flow_from_json(const nlohmann::json& j) {
  try {
    detail::require(j.at("format").get<std::string>() == kCheckpointFormat,
                    ErrorCode::MalformedCheckpoint, "not a calflow checkpoint");
    detail::require(j.at("version").get<int>() == kCheckpointVersion,
                    ErrorCode::MalformedCheckpoint,
                    "unsupported checkpoint version " + j.at("version").dump());
    FlowConfig cfg;
    const auto& c = j.at("config");
    cfg.steps = c.at("steps").get<std::size_t>();
    cfg.hidden = c.at("hidden").get<std::size_t>();
    cfg.cond_channels = c.at("cond_channels").get<std::size_t>();
    cfg.coupling = c.at("coupling").get<bool>();
    ConditionalFlow<T> flow(cfg);
    const auto params = j.at("params").get<std::vector<double>>();
    detail::require(params.size() == flow.param_count() &&
                        j.at("param_count").get<std::size_t>() == flow.param_count(),
                    ErrorCode::MalformedCheckpoint,
                    "checkpoint holds " + std::to_string(params.size()) +
                        " parameters, architecture needs " + std::to_string(flow.param_count()));
    std::transform(params.begin(), params.end(), flow.params().begin(),
                   [](double v) { return static_cast<T>(v); });
    flow.set_actnorm_initialized(j.at("actnorm_initialized").get<bool>());
    return flow;
  } catch (const nlohmann::json::exception& e) {
    detail::fail(ErrorCode::MalformedCheckpoint, std::string("malformed checkpoint: ") + e.what());
  }
}

template <typename T>
ConditionalFlow<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  detail::require(static_cast<bool>(in), ErrorCode::FileNotFound, "no such file: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    detail::fail(ErrorCode::MalformedCheckpoint, path.string() + ": " + e.what());
  }
  return flow_from_json<T>(j);
}

}  // namespace calflow
