#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <sys/wait.h>
#include <unistd.h>

#include "apd/apd_train.hpp"
#include "apd/evaluation.hpp"
#include "apd/traces.hpp"
#include "test_util.hpp"

using namespace apd;
using apd::testing::TempDir;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

RunResult run(const std::string& args) {
  const auto err_path = std::filesystem::temp_directory_path() / ("apd_cli_err_" + std::to_string(::getpid()));
  const std::string cmd = std::string(APD_CLI_PATH) + " " + args + " 2>" + err_path.string();
  RunResult r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  while (fgets(buf.data(), buf.size(), p)) r.out += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = apd::testing::read_file(err_path);
  std::filesystem::remove(err_path);
  return r;
}

json read_json(const fs::path& p) { return json::parse(apd::testing::read_file(p)); }

/// One small pipeline shared by the tests: synthetic data, a 3-member word
/// family, traces, a short APD run and an evaluation sweep.
class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir();
    const auto& d = *dir_;
    json cfg = {{"seed", 4},
                {"paths",
                 {{"corpus", (d / "data/corpus.txt").string()},
                  {"trace_corpus", (d / "data/trace_corpus.txt").string()},
                  {"family_dir", (d / "family").string()},
                  {"traces", (d / "traces.jsonl").string()},
                  {"checkpoint", (d / "apd.bin").string()},
                  {"qa", (d / "data/qa.jsonl").string()},
                  {"prompts", (d / "prompts.txt").string()},
                  {"reports", (d / "reports").string()}}},
                {"vocab", {{"mode", "whitespace"}}},
                {"family",
                 {{"sizes", json::array({json{{"embed", 4}, {"hidden1", 8}, {"hidden2", 8}},
                                         json{{"embed", 8}, {"hidden1", 16}, {"hidden2", 16}},
                                         json{{"embed", 12}, {"hidden1", 32}, {"hidden2", 32}}})},
                  {"window", 2},
                  {"epochs", 1}}},
                {"traces", {{"n_top", 6}, {"n_mid", 2}, {"n_tail", 2}, {"mid_end", 12}}},
                {"train", {{"epochs", 2}, {"warmup", 2}, {"mlp_hidden", 16}, {"lr", 1e-3}}},
                {"generate", {{"max_new_tokens", 5}, {"continuations", 2}}},
                {"synthetic", {{"words", 30}, {"line_length", 12}, {"lines", 80}, {"trace_lines", 12}, {"qa_items", 15}}}};
    apd::testing::write_file(d / "cfg.json", cfg.dump(2));
    apd::testing::write_file(d / "prompts.txt", "w001 w002\nw003\n");
    const std::string c = "-c " + (d / "cfg.json").string();
    steps_ok_ = run("make-synthetic " + c + " --paths.output=" + (d / "data").string()).code == 0;
    family_out_ = run("train-family " + c);
    traces_out_ = run("collect-traces " + c);
    apd_out_ = run("train-apd " + c);
    eval_out_ = run("evaluate " + c + " --plot-data --evaluate.methods='[\"elm\",\"cd\",\"apd\"]'");
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static std::string cfg_arg() { return "-c " + (*dir_ / "cfg.json").string(); }

  static inline TempDir* dir_ = nullptr;
  static inline bool steps_ok_ = false;
  static inline RunResult family_out_, traces_out_, apd_out_, eval_out_;
};

}  // namespace

TEST(Cli, MissingCorpusIsAConfigError) {
  TempDir d;
  EXPECT_EQ(run("train-family --paths.corpus=" + (d / "nope.txt").string() +
                " --paths.family_dir=" + (d / "fam").string())
                .code,
            2);
}

TEST(Cli, UnknownConfigKeyAndBadArgumentsAreConfigErrors) {
  TempDir d;
  apd::testing::write_file(d / "cfg.json", R"({"train": {"learning_rate": 1}})");
  EXPECT_EQ(run("theorem-check -c " + (d / "cfg.json").string()).code, 2);
  EXPECT_EQ(run("theorem-check --no.such.key=1").code, 2);
  EXPECT_EQ(run("no-such-command").code, 2);
}

TEST(Cli, TheoremCheckAndBlindnessProbe) {
  const auto t = run("theorem-check");
  ASSERT_EQ(t.code, 0);
  const auto j = json::parse(t.out);
  EXPECT_EQ(j["configs"], 200);
  EXPECT_LT(j["max_discrepancy"].get<double>(), 1e-9);
  const auto b = run("probe-blindness");
  ASSERT_EQ(b.code, 0);
  const auto k = json::parse(b.out);
  EXPECT_EQ(k["cd_argmax"], "B");
  EXPECT_EQ(k["apd_argmax"], "A");
}

TEST(Cli, SeedEnvironmentOverride) {
  const auto a = run("theorem-check --theorem.configs=5");
  const auto b = run("theorem-check --theorem.configs=5");
  EXPECT_EQ(a.out, b.out);
  const std::string env = "APD_SEED=99 ";
  const std::string cmd = env + APD_CLI_PATH + " theorem-check --theorem.configs=5 2>/dev/null";
  FILE* p = popen(cmd.c_str(), "r");
  std::string out;
  std::array<char, 4096> buf{};
  while (fgets(buf.data(), buf.size(), p)) out += buf.data();
  pclose(p);
  EXPECT_NE(out, a.out);
}

TEST_F(Pipeline, FamilyManifestSizesIncrease) {
  ASSERT_TRUE(steps_ok_);
  ASSERT_EQ(family_out_.code, 0);
  const auto man = read_json(*dir_ / "family/manifest.json");
  ASSERT_EQ(man["members"].size(), 3u);
  for (std::size_t i = 1; i < 3; ++i)
    EXPECT_GT(man["members"][i]["param_count"].get<std::size_t>(), man["members"][i - 1]["param_count"].get<std::size_t>());
  EXPECT_TRUE(fs::exists(*dir_ / "family/config.resolved.json"));
  EXPECT_NE(family_out_.out.find("family_hash " + man["family_hash"].get<std::string>()), std::string::npos);
}

TEST_F(Pipeline, ExistingOutputNeedsForce) {
  EXPECT_EQ(run("train-family " + cfg_arg()).code, 2);
  EXPECT_EQ(run("collect-traces " + cfg_arg()).code, 2);
}

TEST_F(Pipeline, TraceRecordCountEqualsContextCount) {
  ASSERT_EQ(traces_out_.code, 0);
  const auto man = read_json(*dir_ / "family/manifest.json");
  const auto tf = read_traces(*dir_ / "traces.jsonl", man["family_hash"].get<std::string>());
  EXPECT_TRUE(tf.diagnostics.empty());
  EXPECT_EQ(tf.header.family_hash, man["family_hash"].get<std::string>());
  std::size_t tokens = 0;
  for (const auto& line : read_lines(*dir_ / "data/trace_corpus.txt")) tokens += split_tokens(line, TokenMode::Whitespace).size();
  EXPECT_EQ(tf.records.size(), tokens);
  EXPECT_NE(traces_out_.out.find("records " + std::to_string(tokens)), std::string::npos);
}

TEST_F(Pipeline, EmptyCorpusGivesZeroRecords) {
  apd::testing::write_file(*dir_ / "empty.txt", "");
  const auto r = run("collect-traces " + cfg_arg() + " --paths.trace_corpus=" + (*dir_ / "empty.txt").string() +
                     " --paths.traces=" + (*dir_ / "empty_traces.jsonl").string());
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("records 0"), std::string::npos);
  EXPECT_EQ(run("fit-curves " + cfg_arg() + " --paths.traces=" + (*dir_ / "empty_traces.jsonl").string() +
                " --paths.output=" + (*dir_ / "empty_dump.jsonl").string())
                .code,
            0);
  EXPECT_TRUE(apd::testing::read_file(*dir_ / "empty_dump.jsonl").empty());
}

TEST_F(Pipeline, ForeignCorpusIsAMismatch) {
  apd::testing::write_file(*dir_ / "foreign.txt", "zebra quux w001\n");
  EXPECT_EQ(run("collect-traces " + cfg_arg() + " --force --paths.trace_corpus=" + (*dir_ / "foreign.txt").string() +
                " --paths.traces=" + (*dir_ / "foreign_traces.jsonl").string())
                .code,
            2);
}

TEST_F(Pipeline, LossLogHasOneRowPerStep) {
  ASSERT_EQ(apd_out_.code, 0);
  const auto tf = read_traces(*dir_ / "traces.jsonl");
  const std::size_t steps = (tf.records.size() + 63) / 64 * 2;
  const auto csv = apd::testing::read_file(*dir_ / "apd.bin.loss.csv");
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), steps + 1);
  EXPECT_NE(apd_out_.out.find("steps " + std::to_string(steps)), std::string::npos);
}

TEST_F(Pipeline, ZeroLearningRateKeepsTheAmateur) {
  const auto out = (*dir_ / "lr0.bin").string();
  ASSERT_EQ(run("train-apd " + cfg_arg() + " --train.lr=0 --paths.checkpoint=" + out).code, 0);
  const auto fam = load_family(*dir_ / "family");
  const auto ck = load_checkpoint(out, fam.vocab().hash());
  EXPECT_TRUE(ck.alm_prime.params() == fam.amateur().params());
}

TEST_F(Pipeline, TrainingIsReproducible) {
  const auto out = (*dir_ / "again.bin").string();
  ASSERT_EQ(run("train-apd " + cfg_arg() + " --paths.checkpoint=" + out).code, 0);
  EXPECT_EQ(apd::testing::read_file(out), apd::testing::read_file(*dir_ / "apd.bin"));
}

TEST_F(Pipeline, EvaluateWritesTheGridAndABestOfSummary) {
  ASSERT_EQ(eval_out_.code, 0);
  const auto summary = read_json(*dir_ / "reports/summary.json");
  const auto grid = inverse_temperature_grid();
  for (const std::string method : {"cd", "apd"}) {
    const auto& runs = summary[method]["grid"];
    ASSERT_EQ(runs.size(), 19u);
    // re-derive the best 1/T from the per-T report files
    double best_ppl = std::numeric_limits<double>::infinity(), best_inv = -1;
    for (std::size_t i = 0; i < runs.size(); ++i) {
      EXPECT_DOUBLE_EQ(runs[i]["inv_temperature"].get<double>(), grid[i]);
      const auto rep = read_json(*dir_ / "reports" / runs[i]["report"].get<std::string>());
      if (!rep["perplexity"].is_null() && rep["perplexity"].get<double>() < best_ppl) {
        best_ppl = rep["perplexity"].get<double>();
        best_inv = grid[i];
      }
    }
    EXPECT_DOUBLE_EQ(summary[method]["best_inv_temperature"].get<double>(), best_inv);
    EXPECT_DOUBLE_EQ(summary[method]["best"]["perplexity"].get<double>(), best_ppl);
    EXPECT_TRUE(fs::exists(*dir_ / "reports" / (method + "_ppl_vs_invT.tsv")));
  }
  EXPECT_TRUE(fs::exists(*dir_ / "reports/elm.json"));
  EXPECT_TRUE(fs::exists(*dir_ / "reports/config.resolved.json"));
}

TEST_F(Pipeline, SingleItemSmokeRun) {
  std::string first;
  std::istringstream in(apd::testing::read_file(*dir_ / "data/qa.jsonl"));
  std::getline(in, first);
  apd::testing::write_file(*dir_ / "one.jsonl", first + "\n");
  const auto r = run("evaluate " + cfg_arg() + " --paths.qa=" + (*dir_ / "one.jsonl").string() +
                     " --paths.reports=" + (*dir_ / "one_reports").string() + " --evaluate.methods='[\"elm\"]'");
  EXPECT_EQ(r.code, 0);
  EXPECT_TRUE(fs::exists(*dir_ / "one_reports/summary.json"));
}

TEST_F(Pipeline, DecodeApdWithUnchangedAmateurMatchesCd) {
  const auto gen = *dir_ / "gen.jsonl";
  const auto ck = (*dir_ / "unchanged.bin").string();
  ASSERT_EQ(run("train-apd " + cfg_arg() + " --train.lr=0 --paths.checkpoint=" + ck).code, 0);
  const auto r = run("decode " + cfg_arg() + " --paths.checkpoint=" + ck +
                     " --paths.output=" + gen.string() + " --seed=3" + " --generate.sources='[\"cd\",\"apd\"]'");
  ASSERT_EQ(r.code, 0) << r.err;
  std::map<std::string, std::vector<json>> by_source;
  std::istringstream in(apd::testing::read_file(gen));
  std::string line;
  while (std::getline(in, line)) {
    const auto j = json::parse(line);
    by_source[j["source"].get<std::string>()].push_back(j);
  }
  ASSERT_EQ(by_source["cd"].size(), 4u);
  ASSERT_EQ(by_source["apd"].size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(by_source["cd"][i]["token_ids"], by_source["apd"][i]["token_ids"]);
    EXPECT_EQ(by_source["cd"][i]["token_ids"].size(), 5u);
  }
  EXPECT_TRUE(fs::exists(gen.string() + ".config.json"));
}
