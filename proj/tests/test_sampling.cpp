#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "apd/generate.hpp"
#include "test_util.hpp"

using namespace apd;

namespace {

std::vector<double> random_dist(std::size_t v, Rng& rng) {
  std::vector<double> p(v);
  for (auto& x : p) x = std::exp(2.0 * normal01(rng));
  const double z = std::accumulate(p.begin(), p.end(), 0.0);
  for (auto& x : p) x /= z;
  return p;
}

std::set<std::size_t> support(const std::vector<double>& p) {
  std::set<std::size_t> s;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s.insert(i);
  return s;
}

void expect_distribution(const std::vector<double>& p) {
  double z = 0.0;
  for (double v : p) {
    EXPECT_GE(v, 0.0);
    z += v;
  }
  EXPECT_NEAR(z, 1.0, 1e-9);
}

const ModelFamily& family() {
  static const ModelFamily f = apd::testing::small_family();
  return f;
}

}  // namespace

TEST(TopP, Examples) {
  const std::vector<double> p = {0.5, 0.3, 0.2};
  const auto f = top_p_filter(p, 0.7);
  EXPECT_EQ(f.kept, (std::vector<std::size_t>{0, 1}));
  EXPECT_NEAR(f.probs[0], 0.625, 1e-15);
  EXPECT_NEAR(f.probs[1], 0.375, 1e-15);
  EXPECT_EQ(f.probs[2], 0.0);
  EXPECT_EQ(top_p_filter(p, 1.0).probs, p);
  EXPECT_EQ(top_p_filter(p, 0.4).kept, std::vector<std::size_t>{0});
  EXPECT_THROW(top_p_filter(std::vector<double>{}, 0.5), InvalidArgument);
  EXPECT_THROW(top_p_filter(p, 0.0), InvalidArgument);
}

TEST(TopK, Examples) {
  const std::vector<double> p = {0.1, 0.6, 0.3};
  const auto all = top_k_filter(p, 5);
  ASSERT_EQ(all.probs.size(), p.size());
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(all.probs[i], p[i], 1e-15);
  EXPECT_EQ(top_k_filter(p, 1).kept, std::vector<std::size_t>{1});
  const std::vector<double> u(5, 0.2);
  const auto f = top_k_filter(u, 2);
  EXPECT_EQ(f.kept, (std::vector<std::size_t>{0, 1}));
  EXPECT_DOUBLE_EQ(f.probs[0], 0.5);
  EXPECT_DOUBLE_EQ(f.probs[1], 0.5);
}

TEST(Compose, Examples) {
  SamplerConfig cfg;
  cfg.method = FilterMethod::TopPK;
  cfg.p = 1.0;
  cfg.k = 4;
  const std::vector<double> p = {0.5, 0.3, 0.1, 0.1};
  const auto id = compose_filters(p, cfg);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(id[i], p[i], 1e-15);
  cfg.p = 0.7;
  cfg.k = 3;
  const auto q = compose_filters(p, cfg);
  EXPECT_NEAR(q[0], 0.625, 1e-12);
  EXPECT_NEAR(q[1], 0.375, 1e-12);
  EXPECT_EQ(q[2], 0.0);
  EXPECT_EQ(q[3], 0.0);
}

TEST(Compose, AlphaUsesTheSuppliedSource) {
  SamplerConfig cfg;
  cfg.method = FilterMethod::Alpha;
  cfg.alpha = 0.5;
  const std::vector<double> modified = {0.1, 0.1, 0.8}, elm = {0.6, 0.35, 0.05};
  const auto out = compose_filters(modified, cfg, elm);
  EXPECT_NEAR(out[0], 0.5, 1e-15);
  EXPECT_NEAR(out[1], 0.5, 1e-15);
  EXPECT_EQ(out[2], 0.0);
}

TEST(Compose, TemperatureBeforeFiltering) {
  SamplerConfig cfg;
  cfg.temperature = 0.0;
  EXPECT_EQ(compose_filters(std::vector<double>{0.2, 0.5, 0.3}, cfg), (std::vector<double>{0, 1, 0}));
  cfg.temperature = 0.5;
  const auto t = compose_filters(std::vector<double>{0.25, 0.75}, cfg);
  EXPECT_NEAR(t[0], 0.1, 1e-12);
  cfg.temperature = -1;
  EXPECT_THROW(compose_filters(std::vector<double>{1.0}, cfg), InvalidArgument);
}

TEST(Filters, ValidSubsetsMinimalAndMonotone) {
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    const auto p = random_dist(40, rng);
    const double p1 = uniform(rng, 0.05, 1.0), p2 = uniform(rng, p1, 1.0);
    const auto a = top_p_filter(p, p1), b = top_p_filter(p, p2);
    expect_distribution(a.probs);
    const auto sa = support(a.probs), sb = support(b.probs);
    EXPECT_TRUE(std::includes(sb.begin(), sb.end(), sa.begin(), sa.end()));
    double kept_mass = 0.0;
    for (auto i : a.kept) kept_mass += p[i];
    EXPECT_GE(kept_mass, p1 * (1 - 1e-12));
    EXPECT_LT(kept_mass - p[a.kept.back()], p1);
    const std::size_t k1 = 1 + uniform_index(rng, 40), k2 = k1 + uniform_index(rng, 41 - k1);
    const auto c = support(top_k_filter(p, k1).probs), d = support(top_k_filter(p, k2).probs);
    EXPECT_EQ(c.size(), k1);
    EXPECT_TRUE(std::includes(d.begin(), d.end(), c.begin(), c.end()));
    for (auto method : {FilterMethod::None, FilterMethod::TopP, FilterMethod::TopK, FilterMethod::TopPK,
                        FilterMethod::Alpha}) {
      SamplerConfig cfg;
      cfg.method = method;
      cfg.p = p1;
      cfg.k = k1;
      const auto out = compose_filters(p, cfg);
      expect_distribution(out);
      for (std::size_t i = 0; i < p.size(); ++i) EXPECT_TRUE(out[i] == 0.0 || p[i] > 0.0);
    }
  }
}

TEST(SampleToken, PointMassAndReproducibility) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_token(std::vector<double>{0, 0, 1, 0}, rng), 2);
  const std::vector<double> p = {0.2, 0.3, 0.5};
  Rng a(77), b(77);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_token(p, a), sample_token(p, b));
}

TEST(SampleToken, EmpiricalFrequencies) {
  Rng rng(2024);
  const std::vector<double> p = {0.75, 0.25};
  int zeros = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) zeros += sample_token(p, rng) == 0;
  EXPECT_NEAR(static_cast<double>(zeros) / n, 0.75, 0.01);
}

TEST(Generate, ZeroTokensGivesEmptyContinuations) {
  const auto& f = family();
  GenerationRequest req;
  req.prompt = {1, 2};
  req.max_new_tokens = 0;
  const auto out = generate(req, DecodeModels{&f.expert(), &f.amateur(), nullptr}, DecodeConfig{}, SamplerConfig{});
  ASSERT_EQ(out.size(), 8u);
  for (const auto& c : out) EXPECT_TRUE(c.empty());
}

TEST(Generate, EightContinuationsAreReproducible) {
  const auto& f = family();
  GenerationRequest req;
  req.prompt_id = 3;
  req.prompt = {1, 2, 3, 4, 5, 6, 7};  // longer than the window
  req.max_new_tokens = 12;
  req.source = DistributionSource::Cd;
  SamplerConfig sc;
  sc.method = FilterMethod::TopPK;
  sc.seed = 9;
  DecodeConfig dc;
  dc.temperature = 2.0;
  const DecodeModels m{&f.expert(), &f.amateur(), nullptr};
  const auto a = generate(req, m, dc, sc), b = generate(req, m, dc, sc);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), 8u);
  std::set<TokenSeq> distinct(a.begin(), a.end());
  EXPECT_GT(distinct.size(), 1u);
  sc.seed = 10;
  EXPECT_NE(generate(req, m, dc, sc), a);
}

TEST(Generate, ApdWithUnchangedAmateurEqualsCd) {
  const auto& f = family();
  GenerationRequest req;
  req.prompt = {4, 5};
  req.max_new_tokens = 10;
  req.continuations = 3;
  SamplerConfig sc;
  sc.method = FilterMethod::Alpha;
  const DecodeModels m{&f.expert(), &f.amateur(), &f.amateur()};
  req.source = DistributionSource::Cd;
  const auto cd = generate(req, m, DecodeConfig{}, sc);
  req.source = DistributionSource::Apd;
  EXPECT_EQ(generate(req, m, DecodeConfig{}, sc), cd);
}

TEST(Generate, MissingModelsAreRejected) {
  const auto& f = family();
  GenerationRequest req;
  req.prompt = {1};
  req.max_new_tokens = 1;
  req.source = DistributionSource::Apd;
  EXPECT_THROW(generate(req, DecodeModels{&f.expert(), &f.amateur(), nullptr}, DecodeConfig{}, SamplerConfig{}),
               InvalidArgument);
  req.continuations = 0;
  EXPECT_THROW(generate(req, DecodeModels{&f.expert(), nullptr, nullptr}, DecodeConfig{}, SamplerConfig{}),
               InvalidArgument);
}

TEST(Generate, JsonlOutput) {
  const auto& f = family();
  GenerationRequest req;
  req.prompt_id = 12;
  std::ostringstream out;
  write_generations(out, req, {{1, 2}, {3}}, f.vocab(), {{"source", "elm"}});
  std::istringstream in(out.str());
  std::string line;
  std::size_t idx = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["prompt_id"], 12);
    EXPECT_EQ(j["continuation_idx"], idx++);
    EXPECT_EQ(j["source"], "elm");
    EXPECT_TRUE(j["text"].is_string());
  }
  EXPECT_EQ(idx, 2u);
}
