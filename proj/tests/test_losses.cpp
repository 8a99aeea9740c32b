#include <algorithm>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "calflow/gradcheck.hpp"
#include "calflow/losses.hpp"
#include "oracles.hpp"

using namespace calflow;

TEST(Cal, IdenticalImagesGiveZeroValueAndGradient) {
  std::mt19937_64 rng(1);
  const auto a = oracle::random_image<double>(3, 8, 8, rng);
  const auto r = cal_loss(a, a, LossConfig{});
  EXPECT_EQ(r.value, 0.0);
  for (double g : r.grad.data()) EXPECT_EQ(g, 0.0);
}

TEST(Cal, ChannelSwapIsPenalized) {
  std::mt19937_64 rng(2);
  auto a = oracle::random_image<float>(3, 8, 8, rng);
  for (auto& v : a.plane(0)) v *= 0.3f;
  Image b = a;
  std::swap_ranges(b.plane(0).begin(), b.plane(0).end(), b.plane(2).begin());
  EXPECT_GT(cal_loss(b, a, LossConfig{}, false).value, 0.0);
}

TEST(Cal, ShuffleInvariantAndSymmetric) {
  std::mt19937_64 rng(3);
  const auto a = oracle::random_image<double>(3, 8, 8, rng);
  const auto b = oracle::random_image<double>(3, 8, 8, rng);
  auto sa = a, sb = b;
  for (std::size_t c = 0; c < 3; ++c) {
    std::shuffle(sa.plane(c).begin(), sa.plane(c).end(), rng);
    std::shuffle(sb.plane(c).begin(), sb.plane(c).end(), rng);
  }
  const LossConfig cfg;
  const double v = cal_loss(a, b, cfg, false).value;
  EXPECT_EQ(v, cal_loss(sa, sb, cfg, false).value);
  EXPECT_EQ(v, cal_loss(b, a, cfg, false).value);
}

TEST(Cal, ReductionAndPerChannel) {
  std::mt19937_64 rng(4);
  const auto a = oracle::random_image<double>(3, 6, 6, rng);
  const auto b = oracle::random_image<double>(3, 6, 6, rng);
  LossConfig sum;
  LossConfig mean;
  mean.reduction = ChannelReduction::Mean;
  const auto rs = cal_loss(a, b, sum);
  const auto rm = cal_loss(a, b, mean);
  EXPECT_NEAR(rs.value, rs.per_channel_w1[0] + rs.per_channel_w1[1] + rs.per_channel_w1[2], 1e-15);
  EXPECT_NEAR(rm.value, rs.value / 3.0, 1e-15);
  for (std::size_t i = 0; i < rs.grad.size(); ++i) EXPECT_NEAR(rm.grad.data()[i], rs.grad.data()[i] / 3.0, 1e-15);

  for (std::size_t c = 0; c < 3; ++c) {
    const auto ha = soft_hist(a.plane(c), sum.grid, sum.kernel);
    const auto hb = soft_hist(b.plane(c), sum.grid, sum.kernel);
    EXPECT_EQ(rs.per_channel_w1[c], w1_cdf(ha, hb).distance);
  }
}

TEST(Cal, GradientMatchesFiniteDifferences) {
  const auto rep = gradcheck::cal(20, 7);
  EXPECT_EQ(rep.samples, 20u);
  EXPECT_LT(rep.max_rel_error, 1e-5);
}

TEST(Cal, Errors) {
  EXPECT_THROW(cal_loss(Image(3, 4, 4), Image(3, 4, 5), LossConfig{}), Error);
  EXPECT_THROW(cal_loss(Image(1, 4, 4), Image(1, 4, 4), LossConfig{}), Error);
}

TEST(Report, JsonKeys) {
  const auto r = cal_report(0.5, {0.1, 0.2, 0.2}, 0.01, std::nullopt);
  const auto j = to_json(r);
  EXPECT_TRUE(j["nll"].is_null());
  EXPECT_EQ(j["cal"], 0.5);
  EXPECT_EQ(j["total"], 0.01 * 0.5);
  EXPECT_EQ(j["lambda"], 0.01);
  EXPECT_EQ(j["w1_r"], 0.1);
  EXPECT_EQ(j["w1_g"], 0.2);
  EXPECT_EQ(j["w1_b"], 0.2);
  EXPECT_EQ(to_json(cal_report(0.5, {}, 0.01, 3.0))["nll"], 3.0);
}

TEST(TotalLoss, ConsistencyAcrossLambda) {
  Rng rng(5);
  auto flow = gradcheck::tiny_flow(rng, 2);
  const auto x = oracle::random_image<double>(3, 4, 4, rng);
  const auto y = oracle::random_image<double>(3, 4, 4, rng);
  LossConfig cfg;
  cfg.lambda = 0.0;
  const auto r0 = total_loss(x, y, flow, cfg);
  EXPECT_EQ(r0.total, *r0.nll);
  EXPECT_EQ(*r0.nll, flow.nll(y, x));
  EXPECT_EQ(r0.cal, cal_loss(flow.enhance(x, 0.0), y, cfg, false).value);

  cfg.lambda = 0.01;
  const auto r1 = total_loss(x, y, flow, cfg);
  EXPECT_NEAR(r1.total, *r1.nll + 0.01 * r1.cal, 1e-12);

  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    cfg.lambda = u(rng);
    const auto r = total_loss(x, y, flow, cfg);
    EXPECT_NEAR(r.total, *r.nll + cfg.lambda * r.cal, 1e-12);
    EXPECT_EQ(r.lambda, cfg.lambda);
  }
  cfg.lambda = -1.0;
  EXPECT_THROW(total_loss(x, y, flow, cfg), Error);
}

TEST(TotalLoss, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  auto flow = gradcheck::tiny_flow(rng, 1);
  const auto x = oracle::random_image<double>(3, 4, 4, rng);
  const auto y = oracle::random_image<double>(3, 4, 4, rng);
  LossConfig cfg;
  cfg.lambda = 0.5;
  const double nll_weight = 1.0 / 48.0;
  const std::vector<double> theta(flow.params().begin(), flow.params().end());
  auto f = [&](std::span<const double> p) {
    std::copy(p.begin(), p.end(), flow.params().begin());
    const auto r = total_loss(x, y, flow, cfg);
    return nll_weight * *r.nll + cfg.lambda * r.cal;
  };
  auto g = [&](std::span<const double> p) {
    std::copy(p.begin(), p.end(), flow.params().begin());
    std::vector<double> grad(flow.param_count(), 0.0);
    const auto r = total_loss_with_grad(x, y, y, flow, cfg, std::span<double>(grad), 1.0, nll_weight);
    EXPECT_NEAR(r.total, nll_weight * flow.nll(y, x) + cfg.lambda * r.cal, 1e-12);
    return grad;
  };
  const auto res = grad_check(f, g, theta, 1e-6);
  std::string worst;
  EXPECT_LT(max_block_rel_error(res, flow.layout(), &worst), 1e-3) << worst;
}
