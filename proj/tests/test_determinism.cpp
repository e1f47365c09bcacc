#include <gtest/gtest.h>

#include <sstream>

#include "apd/apd_train.hpp"
#include "apd/generate.hpp"
#include "test_util.hpp"

using namespace apd;
using apd::testing::TempDir;

namespace {

struct Artifacts {
  std::string family_bytes;
  std::string trace_bytes;
  std::string checkpoint_bytes;
  std::string generations;
};

/// Trains, traces, fine-tunes and samples from scratch, returning every
/// artifact serialized.
Artifacts run_pipeline(std::uint64_t seed) {
  TempDir dir;
  Artifacts a;
  const auto family = apd::testing::small_family(seed, 40);
  save_family(family, dir / "fam");
  for (std::size_t i = 0; i < family.size(); ++i)
    a.family_bytes += apd::testing::read_file(dir / "fam" / ("m" + std::to_string(i) + ".bin"));
  a.family_bytes += apd::testing::read_file(dir / "fam" / "manifest.json");

  const auto text = apd::testing::synthetic_lines(8, 23);
  const auto traces = collect_traces(family, make_corpus(text, family.vocab()), CandidateLayout{6, 2, 2, 12}, seed);
  std::stringstream ts;
  write_traces(traces, ts);
  a.trace_bytes = ts.str();

  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.warmup = 2;
  cfg.lr = 1e-3;
  cfg.mlp_hidden = 16;
  cfg.seed = seed;
  const auto res = train_alm_prime(traces, family.amateur(), cfg, family.hash());
  save_checkpoint(dir / "ck.bin", res.alm_prime, res.mlp, family.vocab().hash());
  a.checkpoint_bytes = apd::testing::read_file(dir / "ck.bin");

  std::ostringstream gen;
  SamplerConfig sc;
  sc.method = FilterMethod::TopPK;
  sc.seed = seed;
  for (auto src : {DistributionSource::Elm, DistributionSource::Cd, DistributionSource::Apd}) {
    GenerationRequest req;
    req.prompt = family.vocab().tokenize(text[0]);
    req.max_new_tokens = 8;
    req.source = src;
    write_generations(gen, req, generate(req, {&family.expert(), &family.amateur(), &res.alm_prime}, {}, sc),
                      family.vocab());
  }
  a.generations = gen.str();
  return a;
}

}  // namespace

TEST(Determinism, SameSeedReproducesEveryArtifactBitExactly) {
  const auto a = run_pipeline(7), b = run_pipeline(7);
  EXPECT_TRUE(a.family_bytes == b.family_bytes);
  EXPECT_TRUE(a.trace_bytes == b.trace_bytes);
  EXPECT_TRUE(a.checkpoint_bytes == b.checkpoint_bytes);
  EXPECT_EQ(a.generations, b.generations);
}

TEST(Determinism, DifferentSeedChangesArtifacts) {
  const auto a = run_pipeline(7), b = run_pipeline(8);
  EXPECT_FALSE(a.family_bytes == b.family_bytes);
  EXPECT_FALSE(a.checkpoint_bytes == b.checkpoint_bytes);
}
