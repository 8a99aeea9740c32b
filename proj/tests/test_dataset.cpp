#include <fstream>
#include <random>
#include <set>
#include <string>

#include <gtest/gtest.h>

#include "calflow/dataset.hpp"
#include "json.hpp"
#include "scratch.hpp"

using namespace calflow;
namespace fs = std::filesystem;

namespace {

void write_pair(const fs::path& dir, const std::string& stem, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  const auto ref = synthetic_reference(h, w, rng);
  save_png(degrade(ref, Degradation{}, rng), dir / (stem + "_low.png"));
  save_png(ref, dir / (stem + "_ref.png"));
}

ErrorCode code_of(const fs::path& manifest) {
  try {
    load_manifest(manifest);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "manifest accepted: " << manifest;
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST(Manifest, EmptyEntriesIsValid) {
  const auto dir = scratch_dir();
  std::ofstream(dir / "m.json") << R"({"split": "eval", "entries": []})";
  const auto m = load_manifest(dir / "m.json");
  EXPECT_EQ(m.size(), 0u);
  EXPECT_EQ(m.split, Split::Eval);
}

TEST(Manifest, FullTrainingSetSize) {
  const auto dir = scratch_dir();
  write_pair(dir, "p", 4, 6, 1);
  nlohmann::json j{{"split", "train"}, {"entries", nlohmann::json::array()}};
  for (int i = 0; i < 236; ++i)
    j["entries"].push_back({{"low", "p_low.png"}, {"ref", "p_ref.png"}, {"spectrum", i % 2 ? "rgb" : "ir_rgb"}});
  std::ofstream(dir / "train.json") << j.dump();
  const auto m = load_manifest(dir / "train.json");
  EXPECT_EQ(m.size(), 236u);
  EXPECT_EQ(m.entries[1].spectrum, Spectrum::Rgb);
  EXPECT_EQ(m.entries[0].low, dir / "p_low.png");
}

TEST(Manifest, ErrorsNameTheEntry) {
  const auto dir = scratch_dir();
  write_pair(dir, "a", 4, 4, 2);
  write_pair(dir, "b", 6, 4, 3);
  std::ofstream(dir / "missing.json")
      << R"({"split": "train", "entries": [{"low": "a_low.png", "ref": "a_ref.png"}, {"low": "a_low.png", "ref": "nope.png"}]})";
  try {
    load_manifest(dir / "missing.json");
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::FileNotFound);
    EXPECT_NE(std::string(e.what()).find("entry 1"), std::string::npos) << e.what();
  }

  std::ofstream(dir / "shape.json")
      << R"({"split": "train", "entries": [{"low": "a_low.png", "ref": "b_ref.png"}]})";
  EXPECT_EQ(code_of(dir / "shape.json"), ErrorCode::ShapeMismatch);

  std::ofstream(dir / "bad.json") << R"({"split": "train", "entries": [)";
  EXPECT_EQ(code_of(dir / "bad.json"), ErrorCode::MalformedManifest);
  std::ofstream(dir / "split.json") << R"({"split": "test", "entries": []})";
  EXPECT_EQ(code_of(dir / "split.json"), ErrorCode::MalformedManifest);
  std::ofstream(dir / "spectrum.json")
      << R"({"split": "train", "entries": [{"low": "a_low.png", "ref": "a_ref.png", "spectrum": "uv"}]})";
  EXPECT_EQ(code_of(dir / "spectrum.json"), ErrorCode::MalformedManifest);
  EXPECT_EQ(code_of(dir / "absent.json"), ErrorCode::FileNotFound);
}

TEST(Patches, DeterministicAlignedAndFullSize) {
  const auto dir = scratch_dir();
  write_pair(dir, "a", 10, 12, 4);
  write_pair(dir, "b", 10, 12, 5);
  std::ofstream(dir / "m.json")
      << R"({"split": "train", "entries": [{"low": "a_low.png", "ref": "a_ref.png"}, {"low": "b_low.png", "ref": "b_ref.png"}]})";
  const auto m = load_manifest(dir / "m.json");
  const auto p1 = sample_patches(m, 4, 6, 9);
  const auto p2 = sample_patches(m, 4, 6, 9);
  ASSERT_EQ(p1.size(), 6u);
  for (std::size_t i = 0; i < p1.size(); ++i) {
    EXPECT_EQ(p1[i].low, p2[i].low);
    EXPECT_EQ(p1[i].ref, p2[i].ref);
  }

  const auto pairs = load_pairs(m);
  Rng rng(10);
  const auto coords = sample_patch_coords(pairs, 4, 20, rng);
  Rng again(10);
  const auto patches = sample_patches(pairs, 4, 20, again);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const auto& c = coords[i];
    EXPECT_EQ(patches[i].low, crop(pairs[c.pair].low, c.top, c.left, 4, 4));
    EXPECT_EQ(patches[i].ref, crop(pairs[c.pair].ref, c.top, c.left, 4, 4));
  }

  Rng full(11);
  for (const auto& p : sample_patches(pairs, 10, 4, full)) {
    EXPECT_EQ(p.low.height(), 10u);
    EXPECT_EQ(p.low.width(), 10u);
  }
  EXPECT_THROW(sample_patches(m, 11, 1, 0), Error);
}

TEST(Patches, CoordinatesStayInBounds) {
  std::vector<ImagePair> pairs{{Image(3, 400, 600), Image(3, 400, 600)}};
  Rng rng(12);
  std::set<std::size_t> tops;
  for (const auto& c : sample_patch_coords(pairs, 64, 1000, rng)) {
    EXPECT_LE(c.top + 64, 400u);
    EXPECT_LE(c.left + 64, 600u);
    tops.insert(c.top);
  }
  EXPECT_GT(tops.size(), 100u);
}

TEST(Synthetic, PairsAreQuantizedAndBrightened) {
  const auto pairs = synthetic_pairs(3, 16, 16, 13);
  ASSERT_EQ(pairs.size(), 3u);
  for (const auto& p : pairs) {
    for (std::size_t i = 0; i < p.low.size(); ++i) {
      const float l = p.low.data()[i], r = p.ref.data()[i];
      EXPECT_EQ(std::round(l * 255.0f), l * 255.0f);
      EXPECT_EQ(r, static_cast<float>(quantize_u8(std::min(1.0, 4.0 * l))) / 255.0f);
    }
  }
  const auto again = synthetic_pairs(3, 16, 16, 13);
  EXPECT_EQ(again[2].low, pairs[2].low);
}

TEST(Synthetic, RedGainTintsTheRedChannel) {
  Rng a(14), b(14);
  const auto ref = synthetic_reference(16, 16, a);
  synthetic_reference(16, 16, b);
  Degradation d;
  d.noise_sigma = 0.0;
  d.red_gain = 1.5;
  const auto low = degrade(ref, d, b);
  double red = 0, green = 0, ref_red = 0, ref_green = 0;
  for (std::size_t i = 0; i < ref.plane_size(); ++i) {
    red += low.plane(0)[i];
    green += low.plane(1)[i];
    ref_red += ref.plane(0)[i];
    ref_green += ref.plane(1)[i];
  }
  EXPECT_NEAR(red / ref_red, 0.375, 0.01);
  EXPECT_NEAR(green / ref_green, 0.25, 0.01);
}
