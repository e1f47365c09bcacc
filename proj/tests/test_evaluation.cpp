#include <gtest/gtest.h>

#include <sstream>

#include "apd/evaluation.hpp"
#include "test_util.hpp"

using namespace apd;

namespace {

/// A step over 20 candidates with the given expert logits; the amateur is flat.
EvalStep make_step(std::vector<double> elm, int target_pos) {
  EvalStep s;
  for (std::size_t j = 0; j < elm.size(); ++j) s.top.push_back(static_cast<TokenId>(j));
  s.alm.assign(elm.size(), 0.0);
  s.elm = std::move(elm);
  s.target_pos = target_pos;
  s.target = target_pos >= 0 ? s.top[static_cast<std::size_t>(target_pos)] : 99;
  return s;
}

/// Expert logits giving `target` rank `rank` (1-based) among 20 candidates.
EvalStep ranked_step(int target, std::size_t rank) {
  std::vector<double> l(20);
  for (std::size_t j = 0; j < 20; ++j) l[j] = -static_cast<double>(j);
  std::swap(l[static_cast<std::size_t>(target)], l[rank - 1]);
  return make_step(l, target);
}

PreparedItem single_token_item(std::uint64_t id, std::vector<EvalStep> option_steps, std::size_t correct) {
  PreparedItem p;
  p.item.id = id;
  p.item.correct = correct;
  for (auto& s : option_steps) {
    p.item.options.push_back({s.target});
    p.steps.push_back({std::move(s)});
  }
  return p;
}

const ModelFamily& family() {
  static const ModelFamily f = apd::testing::small_family();
  return f;
}

}  // namespace

TEST(AnswerPerplexity, UniformOverTwentyIsTwenty) {
  const std::vector<EvalStep> steps = {make_step(std::vector<double>(20, 0.0), 3)};
  EXPECT_NEAR(answer_perplexity(elm_scorer(), steps), 20.0, 1e-12);
}

TEST(AnswerPerplexity, PointMassIsSmoothed) {
  std::vector<double> l(20, -1000.0);
  l[5] = 0.0;
  const std::vector<EvalStep> steps = {make_step(l, 5)};
  EXPECT_NEAR(answer_perplexity(elm_scorer(), steps), 1.20 / 1.01, 1e-12);
  EXPECT_NEAR(answer_perplexity(elm_scorer(), steps), 1.1881, 1e-4);
}

TEST(AnswerPerplexity, TwoTokenAnswerIsGeometricMean) {
  // half the mass on the target at both steps: smoothed p = (0.5 + 0.01) / 1.2
  std::vector<double> l(20, std::log(0.5 / 19.0));
  l[0] = std::log(0.5);
  const std::vector<EvalStep> steps = {make_step(l, 0), make_step(l, 0)};
  EXPECT_NEAR(answer_perplexity(elm_scorer(), steps), 1.2 / 0.51, 1e-9);
  const std::vector<double> raw = {0.5, 0.5};
  EXPECT_NEAR(std::exp(-(std::log(raw[0]) + std::log(raw[1])) / 2), 2.0, 1e-15);
}

TEST(AnswerPerplexity, InvariantToCandidateOrder) {
  Rng rng(5);
  std::vector<double> l(20);
  for (auto& v : l) v = normal01(rng);
  auto a = make_step(l, 7);
  auto b = a;
  std::vector<std::size_t> perm(20);
  std::iota(perm.begin(), perm.end(), 0u);
  shuffle(perm, rng);
  for (std::size_t j = 0; j < 20; ++j) {
    b.top[perm[j]] = a.top[j];
    b.elm[perm[j]] = a.elm[j];
  }
  b.target_pos = static_cast<int>(perm[7]);
  EXPECT_NEAR(answer_perplexity(elm_scorer(), std::vector<EvalStep>{a}),
              answer_perplexity(elm_scorer(), std::vector<EvalStep>{b}), 1e-12);
}

TEST(AnswerPerplexity, OutsideTopIsAnError) {
  EXPECT_THROW(answer_perplexity(elm_scorer(), std::vector<EvalStep>{make_step(std::vector<double>(20, 0.0), -1)}),
               InvalidArgument);
}

TEST(Accuracy, StrictWinAndTies) {
  // correct option 0 is the expert's top token, option 1 ranked 5th
  std::vector<PreparedItem> items = {single_token_item(0, {ranked_step(0, 1), ranked_step(1, 5)}, 0)};
  EXPECT_EQ(accuracy(elm_scorer(), items, {0}), 1.0);
  // identical steps give equal perplexities: a tie is a miss
  const auto s = make_step(std::vector<double>(20, 0.0), 2);
  items.push_back(single_token_item(1, {s, s}, 0));
  EXPECT_EQ(accuracy(elm_scorer(), items, {1}), 0.0);
  EXPECT_EQ(accuracy(elm_scorer(), items, {0, 1}), 0.5);
}

TEST(Accuracy, TenItemFixture) {
  // item i: correct option at rank r_c, incorrect at rank r_w; correct iff r_c < r_w
  const std::vector<std::pair<std::size_t, std::size_t>> ranks = {{1, 2}, {3, 2}, {1, 9}, {4, 4}, {2, 20},
                                                                  {7, 6}, {1, 3}, {5, 15}, {12, 11}, {2, 1}};
  std::vector<PreparedItem> items;
  std::vector<std::size_t> all;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    auto c = ranked_step(0, ranks[i].first);
    auto w = ranks[i].first == ranks[i].second ? c : ranked_step(1, ranks[i].second);
    items.push_back(single_token_item(i, {c, w}, 0));
    all.push_back(i);
  }
  EXPECT_NEAR(accuracy(elm_scorer(), items, all), 0.5, 1e-15);
}

TEST(Mrr, RanksOneTwoFour) {
  std::vector<PreparedItem> items;
  std::size_t id = 0;
  for (std::size_t rank : {1u, 2u, 4u}) items.push_back(single_token_item(id++, {ranked_step(3, rank), ranked_step(4, 10)}, 0));
  EXPECT_NEAR(mrr(elm_scorer(), items, {0, 1, 2}, MrrMode::Token), (1 + 0.5 + 0.25) / 3, 1e-15);
  EXPECT_NEAR(mrr(elm_scorer(), items, {0, 1, 2}, MrrMode::Token), 0.58333, 1e-5);
  // option mode: each correct option beats the single distractor ranked 10th
  EXPECT_EQ(mrr(elm_scorer(), items, {0, 1, 2}, MrrMode::Option), 1.0);
}

TEST(Mrr, TokenTiesBreakByTokenId) {
  const auto s = make_step(std::vector<double>(20, 0.0), 4);
  EXPECT_EQ(token_rank(softmax(s.elm), s.top, 4), 5u);
  EXPECT_EQ(mrr_mode_from_string("option"), MrrMode::Option);
  EXPECT_THROW(mrr_mode_from_string("both"), InvalidArgument);
}

TEST(Filter, KeepsOnlyAnswerableItems) {
  std::vector<PreparedItem> items;
  items.push_back(single_token_item(0, {ranked_step(0, 1), ranked_step(1, 2)}, 0));
  items.push_back(single_token_item(1, {make_step(std::vector<double>(20, 0.0), -1), ranked_step(1, 2)}, 0));
  items.push_back(single_token_item(2, {ranked_step(0, 1), make_step(std::vector<double>(20, 0.0), -1)}, 0));
  const auto f = filter_items(items);
  EXPECT_EQ(f.ppl_set, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(f.acc_set, (std::vector<std::size_t>{0}));
}

TEST(Filter, CountsMatchBruteForceRescan) {
  const auto& fam = family();
  Rng rng(44);
  std::vector<QAItem> items;
  for (std::uint64_t i = 0; i < 60; ++i) {
    QAItem q;
    q.id = i;
    for (std::size_t t = 0; t < 1 + uniform_index(rng, 4); ++t)
      q.prompt.push_back(static_cast<TokenId>(uniform_index(rng, fam.vocab().size())));
    for (int o = 0; o < 3; ++o) {
      TokenSeq opt;
      for (std::size_t t = 0; t < 1 + uniform_index(rng, 2); ++t)
        opt.push_back(static_cast<TokenId>(uniform_index(rng, fam.vocab().size())));
      q.options.push_back(opt);
    }
    q.correct = uniform_index(rng, 3);
    items.push_back(q);
  }
  const auto prepared = prepare_items(items, EvalModels{&fam.expert(), &fam.amateur(), nullptr, nullptr});
  const auto f = filter_items(prepared);

  auto in_top = [&](const TokenSeq& prompt, const TokenSeq& answer) {
    TokenSeq h = prompt;
    for (auto t : answer) {
      const auto order = rank_desc(fam.expert().probabilities(h));
      if (std::find(order.begin(), order.begin() + 20, static_cast<std::size_t>(t)) == order.begin() + 20) return false;
      h.push_back(t);
    }
    return true;
  };
  std::size_t ppl = 0, acc = 0;
  for (const auto& q : items) {
    if (!in_top(q.prompt, q.options[q.correct])) continue;
    ++ppl;
    for (std::size_t o = 0; o < q.options.size(); ++o)
      if (o != q.correct && in_top(q.prompt, q.options[o])) {
        ++acc;
        break;
      }
  }
  EXPECT_EQ(f.ppl_set.size(), ppl);
  EXPECT_EQ(f.acc_set.size(), acc);
  EXPECT_GT(ppl, 0u);
  EXPECT_LT(ppl, items.size());

  const auto report = evaluate_qa("elm", 1.0, elm_scorer(), prepared);
  EXPECT_EQ(report.n_ppl_items, ppl);
  EXPECT_EQ(report.n_acc_items, acc);
  ASSERT_TRUE(report.perplexity.has_value());
  EXPECT_GE(*report.perplexity, 1.0);
  EXPECT_GE(*report.accuracy, 0.0);
  EXPECT_LE(*report.accuracy, 1.0);
  // accuracy re-derived from the per-item diagnostics
  std::size_t hits = 0;
  for (const auto& d : report.items) hits += d.in_acc_set && d.correct_ppl < d.best_incorrect_ppl;
  EXPECT_NEAR(*report.accuracy, static_cast<double>(hits) / static_cast<double>(acc), 1e-15);
  std::ostringstream csv;
  report.write_csv(csv);
  const auto text = csv.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), static_cast<long>(items.size() + 1));
}

TEST(DistN, Examples) {
  EXPECT_NEAR(*dist_n({{{0, 1, 0, 1}}}, 2), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(*dist_n({{{0, 1, 2, 3, 4}}}, 2), 1.0);
  EXPECT_FALSE(dist_n({{{7}}}, 2).has_value());
  // the single-token prompt is left out of the mean
  EXPECT_NEAR(*dist_n({{{0, 1, 0, 1}}, {{5}}}, 2), 2.0 / 3.0, 1e-15);
}

TEST(DistN, DuplicateContinuationNeverIncreases) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<TokenSeq> conts(3);
    for (auto& c : conts)
      for (int t = 0; t < 8; ++t) c.push_back(static_cast<TokenId>(uniform_index(rng, 5)));
    const double before = *dist_n({conts}, 2);
    EXPECT_GT(before, 0.0);
    EXPECT_LE(before, 1.0);
    conts.push_back(conts[uniform_index(rng, 3)]);
    EXPECT_LE(*dist_n({conts}, 2), before + 1e-15);
  }
}

TEST(Rep, FourGramThreeTimes) {
  EXPECT_TRUE(is_repetitive(TokenSeq{0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3}));
  EXPECT_FALSE(is_repetitive(TokenSeq{0, 1, 2, 3, 0, 1, 2, 3}));
  EXPECT_FALSE(is_repetitive(TokenSeq{0, 1, 2, 3, 4, 5, 6, 7, 8}));
  EXPECT_FALSE(is_repetitive(TokenSeq{}));
  EXPECT_EQ(*rep_ratio({{0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3}, {1, 2}}), 0.5);
  EXPECT_FALSE(rep_ratio({}).has_value());
}

TEST(Report, JsonHasEveryMetric) {
  MetricReport r;
  r.method = "cd";
  r.temperature = 2.0;
  r.perplexity = 3.5;
  r.dist_n[2] = 0.9;
  const auto j = r.to_json();
  EXPECT_EQ(j["inv_temperature"], 0.5);
  EXPECT_EQ(j["perplexity"], 3.5);
  EXPECT_TRUE(j["accuracy"].is_null());
  EXPECT_EQ(j["dist_n"]["2"], 0.9);
}

TEST(Grid, NineteenValuesAndMixingSubset) {
  const auto g = inverse_temperature_grid();
  EXPECT_EQ(g.size(), 19u);
  EXPECT_TRUE(std::is_sorted(g.begin(), g.end()));
  const auto m = inverse_temperature_grid(true);
  EXPECT_EQ(m.size(), 14u);
  EXPECT_EQ(m.back(), 1.0);
}

TEST(Blindness, HandLogitsFavorTheUncommonAnswerUnderCd) {
  const std::vector<double> elm = {2.0, 1.0}, alm = {1.8, -5.0};
  EXPECT_EQ(argmax(cd_distribution(elm, alm, DecodeConfig{})), 1u);
  EXPECT_EQ(argmax(cd_distribution(elm, elm, DecodeConfig{2.0, 0.1, std::nullopt})), argmax(elm));
}

TEST(Blindness, AsymptoteRestoresTheCommonAnswer) {
  const auto sc = default_blindness_scenario();
  const auto r = obvious_blindness_probe(sc);
  EXPECT_EQ(r.elm_argmax, 0u);
  EXPECT_EQ(r.cd_argmax, 1u);
  EXPECT_EQ(r.apd_argmax, 0u);
  EXPECT_GT(r.asymptotes[0], r.asymptotes[1]);
}
