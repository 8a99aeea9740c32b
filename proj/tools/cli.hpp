#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "calflow/calflow.hpp"
#include "calflow/gradcheck.hpp"

namespace calflow::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kIo = 2, kNumeric = 3 };

/// Bad flag value detected after parsing; the message names the flag.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;
using nlohmann::json;

inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::FileNotFound:
    case ErrorCode::DecodeFailed:
    case ErrorCode::UnsupportedBitDepth:
    case ErrorCode::UnsupportedColorType:
    case ErrorCode::WriteFailed:
    case ErrorCode::MalformedManifest:
    case ErrorCode::MalformedCheckpoint:
      return kIo;
    case ErrorCode::NonFinite:
    case ErrorCode::NotNormalized:
      return kNumeric;
    default:
      return kUsage;
  }
}

inline json metric_json(std::optional<double> v) {
  if (!v) return "inf";
  return *v;
}

inline HistogramGrid parse_range(const std::string& text, std::size_t bins) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw UsageError("--range: expected 'lo,hi', got '" + text + "'");
  double lo = 0, hi = 0;
  try {
    std::size_t used = 0;
    const std::string a = text.substr(0, comma), b = text.substr(comma + 1);
    lo = std::stod(a, &used);
    if (used != a.size()) throw std::invalid_argument(a);
    hi = std::stod(b, &used);
    if (used != b.size()) throw std::invalid_argument(b);
  } catch (const std::logic_error&) {
    throw UsageError("--range: expected 'lo,hi', got '" + text + "'");
  }
  if (!(hi > lo)) throw UsageError("--range: upper bound must exceed lower bound");
  return make_grid(lo, hi, bins);
}

inline KernelConfig parse_delta(const std::string& text, const HistogramGrid& grid) {
  if (text == "auto") return KernelConfig::for_grid(grid);
  try {
    std::size_t used = 0;
    const double d = std::stod(text, &used);
    if (used == text.size() && d > 0 && std::isfinite(d)) return KernelConfig{d};
  } catch (const std::logic_error&) {
  }
  throw UsageError("--delta: expected 'auto' or a positive number, got '" + text + "'");
}

inline std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("CALFLOW_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::logic_error&) {
    }
    throw UsageError(std::string("CALFLOW_SEED: not an unsigned integer: '") + env + "'");
  }
  return 0;
}

/// Fails if `out` names the same file as any input.
inline void require_distinct(const fs::path& out, const std::string& flag,
                             std::initializer_list<fs::path> inputs) {
  std::error_code ec;
  for (const auto& in : inputs)
    if (fs::exists(out, ec) && fs::exists(in, ec) && fs::equivalent(out, in, ec))
      throw UsageError(flag + ": refusing to overwrite input " + in.string());
}

inline fs::path sibling(const fs::path& p, const std::string& suffix) {
  return p.parent_path() / (p.stem().string() + suffix);
}

// ----------------------------------------------------------------- commands

struct HistArgs {
  std::string image;
  std::size_t bins = 64;
  std::string range = "0,1";
  std::string delta = "auto";
  std::string out_dir = ".";
  bool verbose = false;
};

inline int run_hist(const HistArgs& a, std::ostream& out) {
  const auto grid = parse_range(a.range, a.bins);
  const auto kernel = parse_delta(a.delta, grid);
  const auto img = load_png(a.image);
  const fs::path dir = a.out_dir;
  std::error_code ec;
  fs::create_directories(dir, ec);
  const char* names[3] = {"r", "g", "b"};
  json files = json::array();
  json sums = json::array();
  for (std::size_t c = 0; c < 3; ++c) {
    const auto h = soft_hist(img.plane(c), grid, kernel);
    const auto path = dir / (fs::path(a.image).stem().string() + "_hist_" + names[c] + ".csv");
    require_distinct(path, "--out-dir", {a.image});
    write_histogram_csv(h, path);
    files.push_back(path.string());
    double s = 0;
    for (double m : h.mass) s += m;
    sums.push_back(s);
  }
  json j{{"files", files}, {"bins", grid.bins()}, {"range", {grid.lower(), grid.upper()}}};
  if (a.verbose) {
    j["delta"] = kernel.delta;
    j["step"] = grid.step();
    j["mass_sums"] = sums;
  }
  out << j.dump(2) << "\n";
  return kOk;
}

struct CalArgs {
  std::string a, b;
  double lambda = 0.01;
  std::size_t bins = 64;
};

inline int run_cal(const CalArgs& a, std::ostream& out) {
  if (!(a.lambda >= 0)) throw UsageError("--lambda: must be >= 0");
  const auto x = load_png(a.a);
  const auto y = load_png(a.b);
  const auto cfg = LossConfig::with_grid(make_grid(0.0, 1.0, a.bins), a.lambda);
  const auto r = cal_loss(x, y, cfg, false);
  out << to_json(cal_report(r.value, r.per_channel_w1, a.lambda, std::nullopt)).dump(2) << "\n";
  return kOk;
}

struct OptimizeArgs {
  std::string init, ref, out, trajectory;
  std::size_t steps = 500;
  double lr = 1e-2;
  bool no_monotone = false;
};

inline int run_optimize(const OptimizeArgs& a, std::ostream& out) {
  if (!(a.lr > 0)) throw UsageError("--lr: must be > 0");
  const fs::path traj = a.trajectory.empty() ? sibling(a.out, "_w1.csv") : fs::path(a.trajectory);
  require_distinct(a.out, "--out", {a.init, a.ref});
  require_distinct(traj, "--trajectory", {a.init, a.ref});
  const auto init = load_png(a.init);
  const auto ref = load_png(a.ref);
  PixelDescentConfig p;
  p.steps = a.steps;
  p.lr = a.lr;
  p.monotone = !a.no_monotone;
  const auto res = optimize_pixels_cal(init, ref, p);
  save_png(res.image, a.out);
  std::ofstream csv(traj);
  detail::require(static_cast<bool>(csv), ErrorCode::WriteFailed, "cannot open " + traj.string() + " for writing");
  csv << "step,w1\n";
  char buf[64];
  for (std::size_t i = 0; i < res.trajectory.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g\n", i, res.trajectory[i]);
    csv << buf;
  }
  detail::require(static_cast<bool>(csv), ErrorCode::WriteFailed, "failed writing " + traj.string());
  out << json{{"initial_w1", res.trajectory.front()},
              {"final_w1", res.trajectory.back()},
              {"steps", a.steps},
              {"image", a.out},
              {"trajectory", traj.string()}}
             .dump(2)
      << "\n";
  return kOk;
}

struct TrainArgs {
  std::string manifest, out, curve;
  double lambda = 0.01;
  std::size_t steps = 1000;
  std::optional<std::uint64_t> seed;
  std::size_t patch = 64;
  std::size_t batch = 8;
  double lr = 1e-4;
  std::size_t bins = 64;
  std::size_t flow_steps = 4;
  std::size_t hidden = 16;
  std::string nll_norm = "image";
  std::size_t log_every = 1;
};

inline int run_train(const TrainArgs& a, std::ostream& out) {
  if (!(a.lambda >= 0)) throw UsageError("--lambda: must be >= 0");
  if (!(a.lr > 0)) throw UsageError("--lr: must be > 0");
  if (a.patch == 0 || a.patch % 2 != 0) throw UsageError("--patch: must be a positive even number");
  if (a.nll_norm != "image" && a.nll_norm != "dim") throw UsageError("--nll-norm: expected 'image' or 'dim'");
  const std::uint64_t seed = resolve_seed(a.seed);
  const fs::path curve = a.curve.empty() ? sibling(a.out, "_curve.csv") : fs::path(a.curve);
  require_distinct(a.out, "--out", {a.manifest});
  require_distinct(curve, "--curve", {a.manifest});

  const auto pairs = load_pairs(load_manifest(a.manifest));
  FlowConfig fc;
  fc.steps = a.flow_steps;
  fc.hidden = a.hidden;
  ConditionalFlow<float> flow(fc);
  Rng init_rng(seed);
  flow.init_random(init_rng);

  TrainConfig tc;
  tc.patch_size = a.patch;
  tc.batch_size = a.batch;
  tc.max_steps = a.steps;
  tc.lambda = a.lambda;
  tc.seed = seed;
  tc.lr = a.lr;
  tc.bins = a.bins;
  tc.log_every = a.log_every;
  tc.nll_normalization = a.nll_norm == "dim" ? NllNormalization::PerDimension : NllNormalization::PerImage;
  const auto res = train_flow<float>(pairs, std::move(flow), tc);
  save_checkpoint(res.flow, a.out);
  write_curve_csv(res.curve, curve);
  out << json{{"checkpoint", a.out},
              {"curve", curve.string()},
              {"seed", seed},
              {"steps", a.steps},
              {"final", {{"nll", res.curve.back().nll}, {"cal", res.curve.back().cal}, {"total", res.curve.back().total}}}}
             .dump(2)
      << "\n";
  return kOk;
}

struct EnhanceArgs {
  std::string ckpt, input, out;
  double tau = 0.0;
  std::optional<std::uint64_t> seed;
};

inline int run_enhance(const EnhanceArgs& a, std::ostream& out) {
  if (!(a.tau >= 0)) throw UsageError("--tau: must be >= 0");
  require_distinct(a.out, "--out", {a.input, a.ckpt});
  const auto flow = load_checkpoint<float>(a.ckpt);
  const auto x = load_png(a.input);
  Rng rng(resolve_seed(a.seed));
  const auto y = flow.enhance(x, a.tau, &rng);
  save_png(y, a.out);
  out << json{{"output", a.out}, {"tau", a.tau}}.dump(2) << "\n";
  return kOk;
}

struct EvalArgs {
  std::string manifest, ckpt;
};

inline int run_eval(const EvalArgs& a, std::ostream& out) {
  const auto m = load_manifest(a.manifest);
  std::optional<ConditionalFlow<float>> flow;
  if (!a.ckpt.empty()) flow = load_checkpoint<float>(a.ckpt);
  json rows = json::array();
  double psnr_sum = 0, ssim_sum = 0;
  bool psnr_inf = false;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto& e = m.entries[i];
    const auto low = load_png(e.low);
    const auto ref = load_png(e.ref);
    const auto restored = flow ? flow->enhance(low, 0.0) : low;
    const auto r = evaluate(restored, ref);
    rows.push_back({{"index", i},
                    {"low", e.low.string()},
                    {"ref", e.ref.string()},
                    {"spectrum", to_string(e.spectrum)},
                    {"psnr", metric_json(r.psnr)},
                    {"ssim", r.ssim}});
    if (r.psnr)
      psnr_sum += *r.psnr;
    else
      psnr_inf = true;
    ssim_sum += r.ssim;
  }
  json mean = nullptr;
  if (m.size() > 0) {
    const double n = static_cast<double>(m.size());
    mean = {{"psnr", psnr_inf ? json("inf") : json(psnr_sum / n)}, {"ssim", ssim_sum / n}};
  }
  out << json{{"split", to_string(m.split)}, {"pairs", rows}, {"mean", mean}}.dump(2) << "\n";
  return kOk;
}

struct GradcheckArgs {
  std::string module = "all";
};

inline int run_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  std::vector<gradcheck::Report> reports;
  const bool all = a.module == "all";
  if (all || a.module == "hist") reports.push_back(gradcheck::histogram());
  if (all || a.module == "cal") reports.push_back(gradcheck::cal());
  if (all || a.module == "flow") {
    reports.push_back(gradcheck::flow_nll());
    reports.push_back(gradcheck::flow_enhance());
  }
  json j = json::array();
  bool ok = true;
  for (const auto& r : reports) {
    j.push_back({{"check", r.name},
                 {"max_rel_error", r.max_rel_error},
                 {"threshold", r.threshold},
                 {"samples", r.samples},
                 {"skipped", r.skipped},
                 {"passed", r.passed()}});
    if (!r.detail.empty()) j.back()["detail"] = r.detail;
    ok = ok && r.passed();
  }
  out << j.dump(2) << "\n";
  return ok ? kOk : kNumeric;
}

// ------------------------------------------------------------------ driver

/// Runs one command line (without the program name). Results go to `out`,
/// diagnostics to `err`.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Color alignment loss and toy conditional flow toolkit", "calflow"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  HistArgs hist;
  auto* c_hist = app.add_subcommand("hist", "Per-channel soft histograms of a PNG as CSV");
  c_hist->add_option("--image", hist.image, "Input PNG")->required();
  c_hist->add_option("--bins", hist.bins, "Bin count")->check(CLI::Range(2, 1 << 20))->capture_default_str();
  c_hist->add_option("--range", hist.range, "Grid bounds lo,hi")->capture_default_str();
  c_hist->add_option("--delta", hist.delta, "Kernel sharpness or 'auto' for (2/step)^2")->capture_default_str();
  c_hist->add_option("--out-dir", hist.out_dir, "Directory for the CSV files")->capture_default_str();
  c_hist->add_flag("--verbose", hist.verbose, "Report the resolved kernel and mass sums");

  CalArgs cal;
  auto* c_cal = app.add_subcommand("cal", "Color alignment loss between two PNGs as JSON");
  c_cal->add_option("--a", cal.a, "Restored PNG")->required();
  c_cal->add_option("--b", cal.b, "Reference PNG")->required();
  c_cal->add_option("--lambda", cal.lambda, "Weight of the color term")->capture_default_str();
  c_cal->add_option("--bins", cal.bins, "Bin count")->check(CLI::Range(2, 1 << 20))->capture_default_str();

  OptimizeArgs opt;
  auto* c_opt = app.add_subcommand("optimize", "Descend the color loss over the pixels of an image");
  c_opt->add_option("--init", opt.init, "Starting PNG")->required();
  c_opt->add_option("--ref", opt.ref, "Reference PNG")->required();
  c_opt->add_option("--out", opt.out, "Output PNG")->required();
  c_opt->add_option("--steps", opt.steps, "Descent steps")->capture_default_str();
  c_opt->add_option("--lr", opt.lr, "Step size")->capture_default_str();
  c_opt->add_option("--trajectory", opt.trajectory, "W1 trajectory CSV (default: <out>_w1.csv)");
  c_opt->add_flag("--no-monotone", opt.no_monotone, "Disable the backtracking line search");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train the toy conditional flow from a manifest");
  c_train->add_option("--manifest", tr.manifest, "Pair manifest JSON")->required();
  c_train->add_option("--out", tr.out, "Checkpoint path")->required();
  c_train->add_option("--curve", tr.curve, "Loss curve CSV (default: <out>_curve.csv)");
  c_train->add_option("--lambda", tr.lambda, "Weight of the color term")->capture_default_str();
  c_train->add_option("--steps", tr.steps, "Adam steps")->capture_default_str();
  c_train->add_option("--seed", tr.seed, "RNG seed (fallback: CALFLOW_SEED, then 0)");
  c_train->add_option("--patch", tr.patch, "Patch size")->capture_default_str();
  c_train->add_option("--batch", tr.batch, "Batch size")->check(CLI::PositiveNumber)->capture_default_str();
  c_train->add_option("--lr", tr.lr, "Adam learning rate")->capture_default_str();
  c_train->add_option("--bins", tr.bins, "Histogram bins")->check(CLI::Range(2, 1 << 20))->capture_default_str();
  c_train->add_option("--flow-steps", tr.flow_steps, "Flow steps")->capture_default_str();
  c_train->add_option("--hidden", tr.hidden, "Coupling hidden channels")->check(CLI::PositiveNumber)->capture_default_str();
  c_train->add_option("--nll-norm", tr.nll_norm, "NLL unit in the objective: image or dim")->capture_default_str();
  c_train->add_option("--log-every", tr.log_every, "Curve row interval")->check(CLI::PositiveNumber)->capture_default_str();

  EnhanceArgs en;
  auto* c_en = app.add_subcommand("enhance", "Restore a low-light PNG with a trained checkpoint");
  c_en->add_option("--ckpt", en.ckpt, "Checkpoint")->required();
  c_en->add_option("--input", en.input, "Input PNG")->required();
  c_en->add_option("--out", en.out, "Output PNG")->required();
  c_en->add_option("--tau", en.tau, "Sampling temperature")->capture_default_str();
  c_en->add_option("--seed", en.seed, "RNG seed for tau > 0 (fallback: CALFLOW_SEED, then 0)");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "PSNR and SSIM over a manifest");
  c_eval->add_option("--manifest", ev.manifest, "Pair manifest JSON")->required();
  c_eval->add_option("--ckpt", ev.ckpt, "Checkpoint; without it the low image is scored as is");

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference checks of the analytic gradients");
  c_gc->add_option("--module", gc.module, "all, hist, cal or flow")
      ->check(CLI::IsMember({"all", "hist", "cal", "flow"}))
      ->capture_default_str();

  std::vector<std::string> argv_store{"calflow"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : argv_store) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  try {
    if (c_hist->parsed()) return run_hist(hist, out);
    if (c_cal->parsed()) return run_cal(cal, out);
    if (c_opt->parsed()) return run_optimize(opt, out);
    if (c_train->parsed()) return run_train(tr, out);
    if (c_en->parsed()) return run_enhance(en, out);
    if (c_eval->parsed()) return run_eval(ev, out);
    if (c_gc->parsed()) return run_gradcheck(gc, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::bad_alloc&) {
    err << "error: out of memory\n";
    return kNumeric;
  }
  return kUsage;
}

}  // namespace calflow::cli
