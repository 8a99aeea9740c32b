#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "calflow/metrics.hpp"
#include "oracles.hpp"

using namespace calflow;

TEST(Psnr, ClosedFormOffset) {
  std::mt19937_64 rng(1);
  const auto a = oracle::random_image<float>(3, 16, 16, rng, 0.0, 0.8);
  Image b = a;
  for (auto& v : b.data()) v += 0.1f;
  // float storage perturbs the offset by ~1e-8, so compare in double
  BasicImage<double> ad = image_cast<double>(a), bd = ad;
  for (auto& v : bd.data()) v += 0.1;
  EXPECT_NEAR(*psnr(ad, bd), 20.0, 1e-6);
  EXPECT_NEAR(*psnr(a, b), 20.0, 1e-4);
}

TEST(Psnr, IdenticalIsInfinite) {
  std::mt19937_64 rng(2);
  const auto a = oracle::random_image<float>(3, 8, 8, rng);
  EXPECT_FALSE(psnr(a, a).has_value());
}

TEST(Psnr, MatchesNaiveMseAndIsSymmetric) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 5; ++t) {
    const auto a = oracle::random_image<float>(3, 13, 9, rng, -0.1, 1.1);
    const auto b = oracle::random_image<float>(3, 13, 9, rng, -0.1, 1.1);
    EXPECT_NEAR(*psnr(a, b), 10.0 * std::log10(1.0 / oracle::mse(a, b)), 1e-9);
    EXPECT_EQ(*psnr(a, b), *psnr(b, a));
  }
}

TEST(Psnr, DecreasesWithNoise) {
  std::mt19937_64 rng(4);
  const auto a = oracle::random_image<float>(3, 32, 32, rng, 0.3, 0.7);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> noise(a.size());
  for (auto& v : noise) v = n(rng);
  double prev = INFINITY;
  for (double amp : {0.01, 0.05, 0.1}) {
    Image b = a;
    for (std::size_t i = 0; i < b.size(); ++i) b.data()[i] += static_cast<float>(amp * noise[i]);
    const double p = *psnr(a, b);
    EXPECT_LT(p, prev);
    prev = p;
  }
}

TEST(Ssim, IdentityIsExactlyOne) {
  std::mt19937_64 rng(5);
  const auto a = oracle::random_image<float>(3, 20, 17, rng);
  EXPECT_EQ(ssim(a, a), 1.0);
}

TEST(Ssim, InversionAndSymmetry) {
  std::mt19937_64 rng(6);
  const auto a = oracle::random_image<float>(3, 16, 16, rng);
  Image inv = a;
  for (auto& v : inv.data()) v = 1.0f - v;
  EXPECT_LT(ssim(a, inv), 1.0);
  const auto b = oracle::random_image<float>(3, 16, 16, rng);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
  EXPECT_LE(ssim(a, b), 1.0);
}

TEST(Ssim, ConstantImagesReduceToLuminanceTerm) {
  Image a(3, 12, 12), b(3, 12, 12);
  for (auto& v : a.data()) v = 0.2f;
  for (auto& v : b.data()) v = 0.7f;
  const double ma = 0.2f, mb = 0.7f;
  const double c1 = 0.01 * 0.01;
  EXPECT_NEAR(ssim(a, b), (2 * ma * mb + c1) / (ma * ma + mb * mb + c1), 1e-12);
}

TEST(Ssim, WindowAndErrors) {
  const auto w = detail::gaussian_window();
  double s = 0.0;
  for (double v : w) s += v;
  EXPECT_NEAR(s, 1.0, 1e-15);
  EXPECT_NEAR(w[5] / w[4], std::exp(1.0 / (2 * 1.5 * 1.5)), 1e-12);
  EXPECT_THROW(ssim(Image(3, 10, 20), Image(3, 10, 20)), Error);
  EXPECT_THROW(ssim(Image(3, 12, 12), Image(3, 12, 13)), Error);
  EXPECT_THROW(psnr(Image(3, 12, 12), Image(3, 12, 13)), Error);
}

TEST(Evaluate, BundlesBoth) {
  std::mt19937_64 rng(7);
  const auto a = oracle::random_image<float>(3, 16, 16, rng);
  const auto b = oracle::random_image<float>(3, 16, 16, rng);
  const auto r = evaluate(a, b);
  EXPECT_EQ(r.psnr, psnr(a, b));
  EXPECT_EQ(r.ssim, ssim(a, b));
}
