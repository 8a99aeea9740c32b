#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "calflow/transport.hpp"
#include "oracles.hpp"

using namespace calflow;

namespace {
const HistogramGrid kGrid = make_grid(0.0, 1.0, 64);
}

TEST(W1, IdenticalIsZero) {
  std::mt19937_64 rng(1);
  const auto h = oracle::random_hist(kGrid, rng);
  const auto r = w1_cdf(h, h);
  EXPECT_EQ(r.distance, 0.0);
  for (double g : r.grad_first) EXPECT_EQ(g, 0.0);
}

TEST(W1, PointMassesAndTranslation) {
  for (std::size_t i : {0u, 5u, 40u})
    for (std::size_t j : {0u, 7u, 63u}) {
      const double expect = std::abs(static_cast<double>(i) - static_cast<double>(j)) * kGrid.step();
      EXPECT_NEAR(w1_cdf(oracle::point_mass(kGrid, i), oracle::point_mass(kGrid, j)).distance, expect, 1e-12);
      EXPECT_NEAR(ot_oracle(oracle::point_mass(kGrid, i), oracle::point_mass(kGrid, j), 1.0), expect, 1e-12);
      EXPECT_NEAR(wp_quantile(oracle::point_mass(kGrid, i), oracle::point_mass(kGrid, j), 2.0, 100), expect, 1e-12);
    }
  const auto base = oracle::point_mass(kGrid, 10);
  const double d1 = w1_cdf(base, oracle::point_mass(kGrid, 20)).distance;
  const double d2 = w1_cdf(base, oracle::point_mass(kGrid, 21)).distance;
  EXPECT_NEAR(d2 - d1, kGrid.step(), 1e-12);
}

TEST(OtOracle, HandExample) {
  const auto g = make_grid(0.0, 1.0, 2);
  const SoftHistogram uniform{g, {0.5, 0.5}, true};
  const SoftHistogram point{g, {1.0, 0.0}, true};
  EXPECT_DOUBLE_EQ(ot_oracle(uniform, point, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(w1_cdf(uniform, point).distance, 0.5);
  EXPECT_EQ(ot_oracle(uniform, uniform, 1.0), 0.0);
  EXPECT_EQ(wp_quantile(uniform, uniform, 3.0, 50), 0.0);
}

TEST(W1, AgreesWithTransportOracleAndQuantiles) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 200; ++t) {
    const auto a = oracle::random_hist(kGrid, rng);
    const auto b = oracle::random_hist(kGrid, rng);
    const double w = w1_cdf(a, b).distance;
    EXPECT_NEAR(w, ot_oracle(a, b, 1.0), 1e-9);
    EXPECT_NEAR(w, wp_quantile(a, b, 1.0, 10000), 2.0 * kGrid.step());
    EXPECT_GE(w, 0.0);
  }
}

TEST(W1, MetricAxioms) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 200; ++t) {
    const auto a = oracle::random_hist(kGrid, rng);
    const auto b = oracle::random_hist(kGrid, rng);
    const auto c = oracle::random_hist(kGrid, rng);
    EXPECT_EQ(w1_cdf(a, b).distance, w1_cdf(b, a).distance);
    EXPECT_LE(w1_cdf(a, a).distance, 1e-12);
    EXPECT_LE(w1_cdf(a, c).distance, w1_cdf(a, b).distance + w1_cdf(b, c).distance + 1e-9);
  }
}

TEST(W1, GradientUnderRenormalizedPerturbations) {
  // Perturb mass_j and renormalize; the derivative of W1 along that path is
  // (g_j - sum_r g_r m_r) / 1 for the analytic grad g.
  std::mt19937_64 rng(4);
  const double eps = 1e-6;
  int checked = 0;
  for (int t = 0; t < 50 && checked < 20; ++t) {
    const auto a = oracle::random_hist(kGrid, rng);
    const auto b = oracle::random_hist(kGrid, rng);
    const auto fa = cdf(a), fb = cdf(b);
    bool near_kink = false;
    for (std::size_t k = 0; k + 1 < fa.size(); ++k) near_kink |= std::abs(fa[k] - fb[k]) < 1e-8 + 4 * eps;
    if (near_kink) continue;
    ++checked;
    const auto r = w1_cdf(a, b);
    double gm = 0.0;
    for (std::size_t i = 0; i < a.mass.size(); ++i) gm += r.grad_first[i] * a.mass[i];
    auto bumped = [&](std::size_t j, double d) {
      SoftHistogram h = a;
      h.mass[j] += d;
      const double z = 1.0 + d;
      for (auto& m : h.mass) m /= z;
      return w1_cdf(h, b).distance;
    };
    double worst = 0.0, scale = 0.0;
    for (std::size_t j = 0; j < a.mass.size(); ++j) {
      const double numeric = (bumped(j, eps) - bumped(j, -eps)) / (2 * eps);
      const double analytic = r.grad_first[j] - gm;
      worst = std::max(worst, std::abs(numeric - analytic));
      scale = std::max({scale, std::abs(numeric), std::abs(analytic)});
    }
    EXPECT_LT(worst / std::max(scale, 1e-12), 1e-5);
  }
  EXPECT_GE(checked, 10);
}

TEST(W1, GradientSignConvention) {
  const auto g = make_grid(0.0, 1.0, 4);
  const SoftHistogram a{g, {1.0, 0.0, 0.0, 0.0}, true};
  const SoftHistogram b{g, {0.0, 0.0, 0.0, 1.0}, true};
  const auto r = w1_cdf(a, b);
  const double s = g.step();
  const std::vector<double> expect{3 * s, 2 * s, s, 0.0};
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(r.grad_first[j], expect[j], 1e-15);
}

TEST(Transport, Errors) {
  std::mt19937_64 rng(5);
  const auto a = oracle::random_hist(kGrid, rng);
  const auto other = oracle::random_hist(make_grid(0.0, 1.0, 32), rng);
  EXPECT_THROW(w1_cdf(a, other), Error);
  EXPECT_THROW(ot_oracle(a, other, 1.0), Error);
  SoftHistogram raw = a;
  raw.normalized = false;
  EXPECT_THROW(w1_cdf(raw, a), Error);
  EXPECT_THROW(wp_quantile(a, a, 0.5, 10), Error);
  EXPECT_THROW(wp_quantile(a, a, 1.0, 0), Error);
  try {
    w1_cdf(a, other);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::GridMismatch);
  }
}
