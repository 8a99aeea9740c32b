#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "calflow/error.hpp"
#include "calflow/flow.hpp"
#include "calflow/image.hpp"
#include "calflow/png_io.hpp"

namespace calflow {

enum class Spectrum { IrRgb, Rgb };
enum class Split { Train, Eval };

inline const char* to_string(Spectrum s) { return s == Spectrum::IrRgb ? "ir_rgb" : "rgb"; }
inline const char* to_string(Split s) { return s == Split::Train ? "train" : "eval"; }

struct ManifestEntry {
  std::filesystem::path low;
  std::filesystem::path ref;
  Spectrum spectrum = Spectrum::IrRgb;
};

struct PairManifest {
  Split split = Split::Train;
  std::vector<ManifestEntry> entries;

  std::size_t size() const noexcept { return entries.size(); }
};

struct ImagePair {
  Image low;
  Image ref;
};

/// Parses and validates a pairing manifest:
///   {"split": "train", "entries": [{"low": "...", "ref": "...", "spectrum": "ir_rgb"}]}
/// Relative paths resolve against the manifest's directory. Every file must
/// exist and each pair must have matching dimensions.
inline PairManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  detail::require(static_cast<bool>(in), ErrorCode::FileNotFound, "no such file: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    detail::fail(ErrorCode::MalformedManifest, path.string() + ": " + e.what());
  }

  const auto base = path.parent_path();
  PairManifest m;
  try {
    const auto split = j.at("split").get<std::string>();
    if (split == "train")
      m.split = Split::Train;
    else if (split == "eval")
      m.split = Split::Eval;
    else
      detail::fail(ErrorCode::MalformedManifest, path.string() + ": unknown split '" + split + "'");

    const auto& entries = j.at("entries");
    detail::require(entries.is_array(), ErrorCode::MalformedManifest,
                    path.string() + ": 'entries' must be an array");
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      const std::string where = path.string() + ": entry " + std::to_string(i);
      ManifestEntry entry;
      entry.low = base / e.at("low").get<std::string>();
      entry.ref = base / e.at("ref").get<std::string>();
      const auto spectrum = e.value("spectrum", std::string("ir_rgb"));
      if (spectrum == "ir_rgb")
        entry.spectrum = Spectrum::IrRgb;
      else if (spectrum == "rgb")
        entry.spectrum = Spectrum::Rgb;
      else
        detail::fail(ErrorCode::MalformedManifest, where + ": unknown spectrum '" + spectrum + "'");
      m.entries.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    detail::fail(ErrorCode::MalformedManifest, path.string() + ": " + e.what());
  }

  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    const std::string where = "manifest entry " + std::to_string(i);
    std::error_code ec;
    for (const auto* p : {&e.low, &e.ref})
      if (!std::filesystem::is_regular_file(*p, ec))
        detail::fail(ErrorCode::FileNotFound, where + ": missing file " + p->string());
    const auto a = png_info(e.low);
    const auto b = png_info(e.ref);
    detail::require(a.width == b.width && a.height == b.height, ErrorCode::ShapeMismatch,
                    where + ": low is " + std::to_string(a.width) + "x" + std::to_string(a.height) +
                        " but ref is " + std::to_string(b.width) + "x" + std::to_string(b.height));
  }
  return m;
}

inline std::vector<ImagePair> load_pairs(const PairManifest& m) {
  std::vector<ImagePair> pairs;
  pairs.reserve(m.size());
  for (const auto& e : m.entries) pairs.push_back({load_png(e.low), load_png(e.ref)});
  return pairs;
}

struct PatchCoord {
  std::size_t pair = 0;
  std::size_t top = 0;
  std::size_t left = 0;
};

/// Draws `batch` (pair, top, left) triples; low and ref are cropped at the
/// same coordinates.
inline std::vector<PatchCoord> sample_patch_coords(std::span<const ImagePair> pairs,
                                                   std::size_t patch, std::size_t batch, Rng& rng) {
  detail::require(!pairs.empty(), ErrorCode::EmptyInput, "sample_patches: no image pairs");
  detail::require(patch > 0, ErrorCode::InvalidArgument, "sample_patches: patch must be > 0");
  for (std::size_t i = 0; i < pairs.size(); ++i)
    detail::require(patch <= std::min(pairs[i].low.height(), pairs[i].low.width()),
                    ErrorCode::InvalidArgument,
                    "sample_patches: patch " + std::to_string(patch) + " exceeds pair " +
                        std::to_string(i) + " of size " + pairs[i].low.shape_string());
  std::vector<PatchCoord> coords;
  coords.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    PatchCoord c;
    c.pair = std::uniform_int_distribution<std::size_t>(0, pairs.size() - 1)(rng);
    const auto& img = pairs[c.pair].low;
    c.top = std::uniform_int_distribution<std::size_t>(0, img.height() - patch)(rng);
    c.left = std::uniform_int_distribution<std::size_t>(0, img.width() - patch)(rng);
    coords.push_back(c);
  }
  return coords;
}

inline std::vector<ImagePair> sample_patches(std::span<const ImagePair> pairs, std::size_t patch,
                                             std::size_t batch, Rng& rng) {
  std::vector<ImagePair> out;
  for (const auto& c : sample_patch_coords(pairs, patch, batch, rng)) {
    const auto& p = pairs[c.pair];
    out.push_back({crop(p.low, c.top, c.left, patch, patch), crop(p.ref, c.top, c.left, patch, patch)});
  }
  return out;
}

inline std::vector<ImagePair> sample_patches(const PairManifest& m, std::size_t patch,
                                             std::size_t batch, std::uint64_t seed) {
  const auto pairs = load_pairs(m);
  Rng rng(seed);
  return sample_patches(pairs, patch, batch, rng);
}

// ------------------------------------------------------------ synthetic data
//
// Stand-in pairs for offline testing. They mimic the shape of the problem
// (dark, noisy input with a red cast) and make no claim about sensor physics.

/// Snaps every sample to the nearest k/255.
template <typename T>
BasicImage<T> quantize_8bit(BasicImage<T> img) {
  for (auto& v : img.data()) v = static_cast<T>(quantize_u8(v)) / T(255);
  return img;
}

/// Smooth random color field in roughly [0.05, 0.95], quantized to 8 bits.
inline Image synthetic_reference(std::size_t height, std::size_t width, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(3, height, width);
  for (std::size_t c = 0; c < 3; ++c) {
    const double base = 0.25 + 0.5 * u(rng);
    double fx[3], fy[3], ph[3], amp[3];
    for (int k = 0; k < 3; ++k) {
      fx[k] = (0.5 + 3.0 * u(rng)) * 2.0 * std::numbers::pi / static_cast<double>(width);
      fy[k] = (0.5 + 3.0 * u(rng)) * 2.0 * std::numbers::pi / static_cast<double>(height);
      ph[k] = 2.0 * std::numbers::pi * u(rng);
      amp[k] = 0.08 + 0.1 * u(rng);
    }
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        double v = base;
        for (int k = 0; k < 3; ++k)
          v += amp[k] * std::sin(fx[k] * static_cast<double>(x) + fy[k] * static_cast<double>(y) + ph[k]);
        img(c, y, x) = static_cast<float>(std::clamp(v, 0.05, 0.95));
      }
  }
  return quantize_8bit(std::move(img));
}

struct Degradation {
  double brightness = 0.25;
  double gamma = 1.0;
  double noise_sigma = 0.01;
  /// Extra gain on the red channel, imitating infrared leakage.
  double red_gain = 1.0;
};

/// low = clamp(brightness * gain_c * ref^gamma + noise), quantized to 8 bits.
inline Image degrade(const Image& ref, const Degradation& d, Rng& rng) {
  std::normal_distribution<double> noise(0.0, 1.0);
  Image low(ref.channels(), ref.height(), ref.width());
  for (std::size_t c = 0; c < ref.channels(); ++c) {
    const double gain = d.brightness * (c == 0 ? d.red_gain : 1.0);
    auto src = ref.plane(c);
    auto dst = low.plane(c);
    for (std::size_t i = 0; i < src.size(); ++i) {
      const double v = gain * std::pow(static_cast<double>(src[i]), d.gamma) + d.noise_sigma * noise(rng);
      dst[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return quantize_8bit(std::move(low));
}

/// Pair whose reference is the low image brightened by `factor` (clamped).
inline ImagePair brightened_pair(const Image& low, double factor) {
  Image ref = low;
  for (auto& v : ref.data()) v = static_cast<float>(std::min(1.0, static_cast<double>(v) * factor));
  return {low, quantize_8bit(std::move(ref))};
}

/// Pairs whose low image is darkened with a red tint and noise. The
/// reference is exactly `1 / brightness` times the low image.
inline std::vector<ImagePair> synthetic_pairs(std::size_t count, std::size_t height, std::size_t width,
                                              std::uint64_t seed, const Degradation& d = {}) {
  Rng rng(seed);
  std::vector<ImagePair> pairs;
  for (std::size_t i = 0; i < count; ++i) {
    const Image scene = synthetic_reference(height, width, rng);
    const Image low = degrade(scene, d, rng);
    pairs.push_back(brightened_pair(low, 1.0 / d.brightness));
  }
  return pairs;
}

}  // namespace calflow
