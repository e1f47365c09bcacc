#include <gtest/gtest.h>

#include <cmath>

#include "apd/cd.hpp"

using namespace apd;

TEST(CdLogit, Examples) {
  EXPECT_DOUBLE_EQ(cd_logit(3.0, 2.0, 2.0), 2.0);
  EXPECT_DOUBLE_EQ(cd_logit(1.7, 0.0, 0.3), 1.7);
  EXPECT_LT(std::abs(cd_logit(3.0, 2.0, 1e9) - 3.0), 1e-8);
}

TEST(CdLogit, NonPositiveTemperatureRejected) {
  EXPECT_THROW(cd_logit(1, 1, 0.0), InvalidArgument);
  EXPECT_THROW(cd_logit(1, 1, -2.0), InvalidArgument);
}

TEST(CdDistribution, EqualLogitsAtUnitTemperatureGiveUniform) {
  const std::vector<double> l = {0.3, -1.0, 2.0, 5.0};
  const auto p = cd_distribution(l, l, DecodeConfig{});
  for (double v : p) EXPECT_NEAR(v, 0.25, 1e-12);
}

TEST(CdDistribution, HandSoftmax) {
  const std::vector<double> zero = {0.0, 0.0};
  auto p = cd_distribution(zero, zero, DecodeConfig{});
  EXPECT_NEAR(p[0], 0.5, 1e-12);
  const std::vector<double> elm = {std::log(3.0), 0.0};
  p = cd_distribution(elm, zero, DecodeConfig{});
  EXPECT_NEAR(p[0], 0.75, 1e-12);
  EXPECT_NEAR(p[1], 0.25, 1e-12);
}

TEST(CdDistribution, LengthMismatchRejected) {
  EXPECT_THROW(cd_distribution(std::vector<double>{1, 2}, std::vector<double>{1}, DecodeConfig{}), InvalidArgument);
}

TEST(CdDistribution, ShiftInvariant) {
  const std::vector<double> elm = {1.0, 0.2, -0.5}, alm = {0.1, 0.7, 0.0};
  const DecodeConfig cfg{1.7, 0.1, std::nullopt};
  const auto p = cd_distribution(elm, alm, cfg);
  auto e2 = elm, a2 = alm;
  for (auto& v : e2) v += 4.0;
  for (auto& v : a2) v -= 9.0;
  const auto q = cd_distribution(e2, a2, cfg);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-9);
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-9);
}

TEST(CdDistribution, RestrictionRenormalizesOverSubset) {
  const std::vector<double> elm = {std::log(3.0), 5.0, 0.0}, alm = {0, 0, 0};
  DecodeConfig cfg;
  cfg.restrict_to = std::vector<std::size_t>{0, 2};
  const auto p = cd_distribution(elm, alm, cfg);
  EXPECT_NEAR(p[0], 0.75, 1e-12);
  EXPECT_EQ(p[1], 0.0);
  EXPECT_NEAR(p[2], 0.25, 1e-12);
}

TEST(ApdDistribution, SharesTheCdFormula) {
  const std::vector<double> l = {1.0, 2.0};
  for (double v : apd_distribution(l, l, DecodeConfig{})) EXPECT_NEAR(v, 0.5, 1e-12);
  const std::vector<double> elm = {std::log(3.0), 0.0}, zero = {0.0, 0.0};
  EXPECT_NEAR(apd_distribution(elm, zero, DecodeConfig{})[0], 0.75, 1e-12);
  EXPECT_THROW(apd_distribution(std::vector<double>{1}, std::vector<double>{1, 2}, DecodeConfig{}), InvalidArgument);
  EXPECT_EQ(DecodeConfig{}.temperature, 1.0);
}

TEST(HlmSize, PythiaSizes) {
  const auto r = hlm_size(std::log(6.9e9), std::log(7.0e7), 2.0);
  EXPECT_NEAR(std::exp(r.hlm_log_size) / 6.8014e11, 1.0, 1e-4);
  EXPECT_DOUBLE_EQ(r.logit_scale, 0.5);
  EXPECT_NEAR(r.size_gap, std::log(6.9e9 / 7.0e7), 1e-12);
}

TEST(HlmSize, LimitsAndDegenerateGap) {
  const double e = std::log(1e9), a = std::log(1e6);
  EXPECT_NEAR(hlm_size(e, a, 1e9).hlm_log_size, e, 1e-6);
  for (double t : {1.5, 2.0, 7.0}) EXPECT_NEAR(hlm_size(e, e, t).hlm_log_size, e, 1e-12);
}

TEST(HlmSize, PreconditionsEnforced) {
  EXPECT_THROW(hlm_size(3, 1, 1.0), InvalidArgument);
  EXPECT_THROW(hlm_size(3, 1, 0.5), InvalidArgument);
  EXPECT_THROW(hlm_size(1, 3, 2.0), InvalidArgument);
}

TEST(HlmSize, MonotoneDecreasingInTemperatureAndAboveElm) {
  const double e = std::log(6.9e9), a = std::log(7e7);
  double prev = std::numeric_limits<double>::infinity();
  for (double t = 1.1; t < 50; t *= 1.3) {
    const auto r = hlm_size(e, a, t);
    EXPECT_GT(r.hlm_log_size, e);
    EXPECT_LT(r.hlm_log_size, prev);
    EXPECT_GT(r.logit_scale, 0.0);
    EXPECT_LT(r.logit_scale, 1.0);
    prev = r.hlm_log_size;
  }
}

TEST(HlmAnalysis, LogitGapIsAmateurMinusExpert) {
  const std::vector<double> elm = {2.0, 1.0}, alm = {1.8, -5.0};
  const auto r = hlm_analysis<double>(3.0, 1.0, 2.0, elm, alm);
  EXPECT_NEAR(r.logit_gap[0], -0.2, 1e-12);
  EXPECT_NEAR(r.logit_gap[1], -6.0, 1e-12);
}

TEST(VerifyTheorem, HandExample) {
  const std::vector<LogitLine> line = {{1.0, 0.0}};
  EXPECT_DOUBLE_EQ(cd_logit(line[0].at(3.0), line[0].at(1.0), 2.0), 2.5);
  EXPECT_DOUBLE_EQ(hlm_size(3.0, 1.0, 2.0).hlm_log_size, 5.0);
  EXPECT_LT(verify_theorem(line, 3.0, 1.0, 2.0), 1e-12);
}

TEST(VerifyTheorem, ZeroSlopeLines) {
  const std::vector<LogitLine> lines = {{0.0, 4.0}, {0.0, -2.0}};
  for (double t : {2.0, 4.0, 10.0}) {
    for (const auto& l : lines) EXPECT_NEAR(cd_logit(l.intercept, l.intercept, t), (1 - 1 / t) * l.intercept, 1e-12);
    EXPECT_LT(verify_theorem(lines, 5.0, 2.0, t), 1e-9);
  }
}

TEST(VerifyTheorem, RandomLinearFamilies) {
  Rng rng(17);
  for (int i = 0; i < 200; ++i) {
    std::vector<LogitLine> lines(20);
    for (auto& l : lines) l = {uniform(rng, -2, 2), uniform(rng, -10, 10)};
    const double a = uniform(rng, 10, 20), e = a + uniform(rng, 0.1, 5);
    for (double t : {1.5, 2.0, 4.0, 10.0}) EXPECT_LT(verify_theorem(lines, e, a, t), 1e-9);
  }
}

TEST(AlphaMask, Examples) {
  const std::vector<double> p = {0.5, 0.3, 0.04};
  EXPECT_EQ(alpha_mask(p, 0.1), (std::vector<std::size_t>{0, 1}));
  const std::vector<double> tie = {0.4, 0.4, 0.2};
  EXPECT_EQ(alpha_mask(tie, 1.0), (std::vector<std::size_t>{0, 1}));
  const std::vector<double> q = {0.6, 0.3, 1e-9, 0.0};
  EXPECT_EQ(alpha_mask(q, 1e-12), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_THROW(alpha_mask(std::vector<double>{}, 0.1), InvalidArgument);
  EXPECT_THROW(alpha_mask(p, 0.0), InvalidArgument);
}

TEST(AlphaMask, MonotoneShrinkingInAlpha) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> p(30);
    for (auto& v : p) v = uniform01(rng);
    const double a1 = uniform(rng, 0.01, 1.0), a2 = uniform(rng, a1, 1.0);
    const auto m1 = alpha_mask(p, a1), m2 = alpha_mask(p, a2);
    EXPECT_TRUE(std::includes(m1.begin(), m1.end(), m2.begin(), m2.end()));
    EXPECT_NE(std::find(m2.begin(), m2.end(), argmax(p)), m2.end());
  }
}
