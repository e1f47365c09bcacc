#pragma once

// QA-style scoring over the expert's top-20 tokens, generation diversity
// metrics, and the two-token obvious-blindness probe.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "apd/cd.hpp"
#include "apd/curves.hpp"
#include "apd/family.hpp"
#include "apd/generate.hpp"
#include "apd/on_the_fly.hpp"

namespace apd {

struct QAItem {
  std::uint64_t id = 0;
  TokenSeq prompt;
  std::vector<TokenSeq> options;
  std::size_t correct = 0;

  void validate() const {
    require(options.size() >= 2, "QA item " + std::to_string(id) + " needs at least two options");
    require(correct < options.size(), "QA item " + std::to_string(id) + " has an invalid correct index");
    for (const auto& o : options) require(!o.empty(), "QA item " + std::to_string(id) + " has an empty option");
  }
};

inline constexpr std::size_t kEvalTopK = 20;
inline constexpr double kEvalSmoothing = 0.01;

/// Everything needed to score one answer token under any method: the expert's
/// top-k tokens (by descending ELM probability) and each model's view of them.
struct EvalStep {
  std::vector<TokenId> top;
  std::vector<double> elm;        // logits over `top`
  std::vector<double> alm;
  std::vector<double> alm_prime;  // empty when no ALM' was given
  std::vector<std::vector<double>> member_probs;  // [model][k], normalised over `top`
  std::vector<double> p_ac;       // normalised asymptotes, filled by attach_on_the_fly
  TokenId target = 0;
  int target_pos = -1;  // index of the target in `top`, -1 if outside

  bool in_top() const { return target_pos >= 0; }
};

struct PreparedItem {
  QAItem item;
  std::vector<std::vector<EvalStep>> steps;  // [option][answer position], teacher forced

  bool option_in_top(std::size_t o) const {
    return std::all_of(steps[o].begin(), steps[o].end(), [](const EvalStep& s) { return s.in_top(); });
  }
};

struct EvalModels {
  const TinyLM* elm = nullptr;
  const TinyLM* alm = nullptr;
  const TinyLM* alm_prime = nullptr;
  const ModelFamily* family = nullptr;  // needed for on-the-fly extrapolation only
};

/// Runs the models once over every teacher-forced step of every option.
inline std::vector<PreparedItem> prepare_items(const std::vector<QAItem>& items, const EvalModels& m,
                                               std::size_t top_k = kEvalTopK, std::size_t batch = 512) {
  require(m.elm && m.alm, "evaluation needs an expert and an amateur");
  std::vector<PreparedItem> out;
  struct Slot {
    std::size_t item, option, pos;
  };
  std::vector<Slot> slots;
  std::vector<TokenSeq> histories;
  for (const auto& it : items) {
    it.validate();
    PreparedItem p;
    p.item = it;
    p.steps.resize(it.options.size());
    for (std::size_t o = 0; o < it.options.size(); ++o) {
      p.steps[o].resize(it.options[o].size());
      TokenSeq h = it.prompt;
      for (std::size_t t = 0; t < it.options[o].size(); ++t) {
        slots.push_back({out.size(), o, t});
        histories.push_back(m.elm->fit_window(h));
        h.push_back(it.options[o][t]);
      }
    }
    out.push_back(std::move(p));
  }
  std::vector<const TinyLM*> members;
  if (m.family)
    for (const auto& mem : m.family->members()) members.push_back(&mem);

  for (std::size_t start = 0; start < histories.size(); start += batch) {
    const std::size_t end = std::min(histories.size(), start + batch);
    const std::vector<TokenSeq> chunk(histories.begin() + static_cast<std::ptrdiff_t>(start),
                                      histories.begin() + static_cast<std::ptrdiff_t>(end));
    const auto le = m.elm->forward(chunk).logits;
    const auto la = m.alm->forward(chunk).logits;
    MatF lp;
    if (m.alm_prime) lp = m.alm_prime->forward(chunk).logits;
    std::vector<MatF> lm;
    for (auto* mem : members) lm.push_back(mem->forward(chunk).logits);

    for (std::size_t r = start; r < end; ++r) {
      const auto row = static_cast<Eigen::Index>(r - start);
      const auto& sl = slots[r];
      auto& st = out[sl.item].steps[sl.option][sl.pos];
      st.target = out[sl.item].item.options[sl.option][sl.pos];
      std::vector<double> elm_full(static_cast<std::size_t>(le.cols()));
      for (Eigen::Index v = 0; v < le.cols(); ++v) elm_full[static_cast<std::size_t>(v)] = le(row, v);
      const auto order = rank_desc(elm_full);
      const std::size_t k = std::min(top_k, order.size());
      for (std::size_t j = 0; j < k; ++j) {
        const auto tok = static_cast<Eigen::Index>(order[j]);
        st.top.push_back(static_cast<TokenId>(order[j]));
        st.elm.push_back(le(row, tok));
        st.alm.push_back(la(row, tok));
        if (m.alm_prime) st.alm_prime.push_back(lp(row, tok));
        if (st.top.back() == st.target) st.target_pos = static_cast<int>(j);
      }
      for (const auto& lmat : lm) {
        // softmax restricted to the top set equals the full softmax renormalised over it
        std::vector<double> sub;
        for (auto t : st.top) sub.push_back(lmat(row, t));
        st.member_probs.push_back(softmax(sub));
      }
    }
  }
  return out;
}

/// Fits every top token's curve once per step; the result is reused for any
/// mixing weight.
inline void attach_on_the_fly(std::vector<PreparedItem>& items, std::span<const double> log_sizes,
                              const FitOptions& opt = {}) {
  for (auto& it : items)
    for (auto& option : it.steps)
      for (auto& st : option) {
        require(st.member_probs.size() == log_sizes.size(), "on-the-fly scoring needs every family member");
        TraceRecord rec;
        rec.cands = st.top;
        rec.prov.assign(st.top.size(), Provenance::Top);
        for (const auto& row : st.member_probs) rec.probs.emplace_back(row.begin(), row.end());
        st.p_ac = fit_on_the_fly(rec, log_sizes, 0.0, opt).p_ac;
      }
}

/// Probabilities (any positive scale) over a step's top set.
using StepScorer = std::function<std::vector<double>(const EvalStep&)>;

inline StepScorer elm_scorer() {
  return [](const EvalStep& s) { return softmax(s.elm); };
}

inline StepScorer cd_scorer(double temperature) {
  require(temperature > 0.0, "temperature T must be > 0");
  return [temperature](const EvalStep& s) {
    return cd_distribution(s.elm, s.alm, DecodeConfig{temperature, 0.1, std::nullopt});
  };
}

inline StepScorer apd_scorer(double temperature) {
  require(temperature > 0.0, "temperature T must be > 0");
  return [temperature](const EvalStep& s) {
    require(!s.alm_prime.empty(), "APD scoring needs the fine-tuned amateur");
    return apd_distribution(s.elm, s.alm_prime, DecodeConfig{temperature, 0.1, std::nullopt});
  };
}

/// (1 - w) * ELM + w * normalised asymptotes.
inline StepScorer on_the_fly_scorer(double mix_weight) {
  require(mix_weight >= 0.0 && mix_weight <= 1.0, "mix weight 1/T must be in [0,1]");
  return [mix_weight](const EvalStep& s) {
    require(!s.p_ac.empty(), "on-the-fly asymptotes were not attached");
    auto p = softmax(s.elm);
    for (std::size_t j = 0; j < p.size(); ++j) p[j] = (1.0 - mix_weight) * p[j] + mix_weight * s.p_ac[j];
    return p;
  };
}

/// Renormalise over the top set, add 0.01 to each entry, renormalise again.
inline std::vector<double> smooth_top(std::span<const double> probs, double smoothing = kEvalSmoothing) {
  require(!probs.empty(), "empty candidate distribution");
  double z = 0.0;
  for (double p : probs) {
    require(p >= 0.0 && std::isfinite(p), "candidate distribution has negative or non-finite mass");
    z += p;
  }
  require(z > 0.0, "candidate distribution has no mass");
  std::vector<double> out(probs.size());
  double z2 = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = probs[i] / z + smoothing;
    z2 += out[i];
  }
  for (auto& v : out) v /= z2;
  return out;
}

/// Sum of -log p over the answer tokens (and their count) for one option.
struct AnswerNll {
  double nll = 0.0;
  std::size_t tokens = 0;
  double perplexity() const { return std::exp(nll / static_cast<double>(tokens)); }
};

inline AnswerNll answer_nll(const StepScorer& scorer, std::span<const EvalStep> steps) {
  require(!steps.empty(), "answer has no tokens");
  AnswerNll r;
  for (const auto& st : steps) {
    if (!st.in_top())
      throw InvalidArgument("answer token " + std::to_string(st.target) + " is outside the expert's top set");
    const auto p = smooth_top(scorer(st));
    r.nll -= std::log(p[static_cast<std::size_t>(st.target_pos)]);
    ++r.tokens;
  }
  return r;
}

inline double answer_perplexity(const StepScorer& scorer, std::span<const EvalStep> steps) {
  return answer_nll(scorer, steps).perplexity();
}

struct FilteredItems {
  std::vector<std::size_t> ppl_set;  // correct answer fully inside the top set
  std::vector<std::size_t> acc_set;  // ... and at least one incorrect option too
};

inline FilteredItems filter_items(const std::vector<PreparedItem>& items) {
  FilteredItems f;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    if (!it.option_in_top(it.item.correct)) continue;
    f.ppl_set.push_back(i);
    for (std::size_t o = 0; o < it.item.options.size(); ++o)
      if (o != it.item.correct && it.option_in_top(o)) {
        f.acc_set.push_back(i);
        break;
      }
  }
  return f;
}

enum class MrrMode { Token, Option };

inline std::string to_string(MrrMode m) { return m == MrrMode::Token ? "token" : "option"; }

inline MrrMode mrr_mode_from_string(const std::string& s) {
  if (s == "token") return MrrMode::Token;
  if (s == "option") return MrrMode::Option;
  throw InvalidArgument("unknown MRR mode '" + s + "'");
}

struct ItemDiagnostics {
  std::uint64_t id = 0;
  bool in_ppl_set = false;
  bool in_acc_set = false;
  double correct_ppl = std::nan("");
  double best_incorrect_ppl = std::nan("");
  bool correct = false;
  double reciprocal_rank = std::nan("");
};

/// Per-option perplexities for the options fully inside the top set.
inline std::map<std::size_t, double> option_perplexities(const StepScorer& scorer, const PreparedItem& it) {
  std::map<std::size_t, double> out;
  for (std::size_t o = 0; o < it.item.options.size(); ++o)
    if (it.option_in_top(o)) out[o] = answer_perplexity(scorer, it.steps[o]);
  return out;
}

/// Correct iff the correct option has strictly the lowest perplexity.
inline bool item_correct(const std::map<std::size_t, double>& ppl, std::size_t correct) {
  const double c = ppl.at(correct);
  for (const auto& [o, v] : ppl)
    if (o != correct && v <= c) return false;
  return true;
}

/// Rank of `tok` by descending probability, ties broken by ascending token id.
inline std::size_t token_rank(std::span<const double> probs, std::span<const TokenId> top, std::size_t pos) {
  std::size_t rank = 1;
  for (std::size_t j = 0; j < probs.size(); ++j)
    if (j != pos && (probs[j] > probs[pos] || (probs[j] == probs[pos] && top[j] < top[pos]))) ++rank;
  return rank;
}

inline double reciprocal_rank(const StepScorer& scorer, const PreparedItem& it, MrrMode mode,
                              const std::map<std::size_t, double>& ppl) {
  const auto& correct = it.steps[it.item.correct];
  if (mode == MrrMode::Token && correct.size() == 1) {
    const auto p = scorer(correct[0]);
    return 1.0 / static_cast<double>(token_rank(p, correct[0].top, static_cast<std::size_t>(correct[0].target_pos)));
  }
  // options ranked by perplexity; ties go against the correct option
  const double c = ppl.at(it.item.correct);
  std::size_t rank = 1;
  for (const auto& [o, v] : ppl)
    if (o != it.item.correct && v <= c) ++rank;
  return 1.0 / static_cast<double>(rank);
}

inline double accuracy(const StepScorer& scorer, const std::vector<PreparedItem>& items,
                       const std::vector<std::size_t>& acc_set) {
  require(!acc_set.empty(), "accuracy over an empty item set");
  std::size_t hits = 0;
  for (auto i : acc_set) hits += item_correct(option_perplexities(scorer, items[i]), items[i].item.correct);
  return static_cast<double>(hits) / static_cast<double>(acc_set.size());
}

inline double mrr(const StepScorer& scorer, const std::vector<PreparedItem>& items,
                  const std::vector<std::size_t>& subset, MrrMode mode = MrrMode::Token) {
  require(!subset.empty(), "MRR over an empty item set");
  double sum = 0.0;
  for (auto i : subset) sum += reciprocal_rank(scorer, items[i], mode, option_perplexities(scorer, items[i]));
  return sum / static_cast<double>(subset.size());
}

// ---- generation metrics ----

/// Unique n-grams across one prompt's continuations over their total count;
/// averaged over prompts that have at least one n-gram.
inline std::optional<double> dist_n(const std::vector<std::vector<TokenSeq>>& per_prompt, std::size_t n) {
  require(n >= 1, "n-gram order must be >= 1");
  double sum = 0.0;
  std::size_t counted = 0;
  for (const auto& conts : per_prompt) {
    std::set<std::vector<TokenId>> unique;
    std::size_t total = 0;
    for (const auto& c : conts)
      for (std::size_t i = 0; i + n <= c.size(); ++i) {
        unique.emplace(c.begin() + static_cast<std::ptrdiff_t>(i), c.begin() + static_cast<std::ptrdiff_t>(i + n));
        ++total;
      }
    if (total == 0) continue;
    sum += static_cast<double>(unique.size()) / static_cast<double>(total);
    ++counted;
  }
  if (counted == 0) return std::nullopt;
  return sum / static_cast<double>(counted);
}

/// Severe repetition: some n-gram (default 4) occurs at least `min_count` (3) times.
inline bool is_repetitive(std::span<const TokenId> seq, std::size_t n = 4, std::size_t min_count = 3) {
  std::map<std::vector<TokenId>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i)
    if (++counts[std::vector<TokenId>(seq.begin() + static_cast<std::ptrdiff_t>(i),
                                      seq.begin() + static_cast<std::ptrdiff_t>(i + n))] >= min_count)
      return true;
  return false;
}

inline std::optional<double> rep_ratio(const std::vector<TokenSeq>& continuations) {
  if (continuations.empty()) return std::nullopt;
  std::size_t rep = 0;
  for (const auto& c : continuations) rep += is_repetitive(c);
  return static_cast<double>(rep) / static_cast<double>(continuations.size());
}

// ---- reports ----

struct MetricReport {
  std::string method;
  double temperature = 1.0;  // T (the grid is over 1/T)
  std::optional<double> perplexity;
  std::optional<double> accuracy;
  std::optional<double> mrr;
  std::map<std::size_t, double> dist_n;
  std::optional<double> rep;
  std::size_t n_items = 0;
  std::size_t n_ppl_items = 0;
  std::size_t n_acc_items = 0;
  std::string mrr_mode = "token";
  std::vector<ItemDiagnostics> items;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["method"] = method;
    j["temperature"] = temperature;
    j["inv_temperature"] = 1.0 / temperature;
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    j["perplexity"] = opt(perplexity);
    j["accuracy"] = opt(accuracy);
    j["mrr"] = opt(mrr);
    j["mrr_mode"] = mrr_mode;
    j["rep"] = opt(rep);
    nlohmann::json d = nlohmann::json::object();
    for (const auto& [n, v] : dist_n) d[std::to_string(n)] = v;
    j["dist_n"] = d;
    j["counts"] = {{"items", n_items}, {"perplexity_items", n_ppl_items}, {"accuracy_items", n_acc_items}};
    return j;
  }

  void write_csv(std::ostream& out) const {
    out << "item_id,in_ppl_set,in_acc_set,correct_ppl,best_incorrect_ppl,correct,reciprocal_rank\n";
    auto num = [](double v) { return std::isnan(v) ? std::string() : double_repr(v); };
    for (const auto& d : items)
      out << d.id << ',' << d.in_ppl_set << ',' << d.in_acc_set << ',' << num(d.correct_ppl) << ','
          << num(d.best_incorrect_ppl) << ',' << d.correct << ',' << num(d.reciprocal_rank) << '\n';
  }
};

/// Perplexity (token-weighted over the perplexity set), accuracy and MRR for
/// one scorer, plus per-item diagnostics.
inline MetricReport evaluate_qa(const std::string& method, double temperature, const StepScorer& scorer,
                                const std::vector<PreparedItem>& items, MrrMode mode = MrrMode::Token) {
  MetricReport r;
  r.method = method;
  r.temperature = temperature;
  r.mrr_mode = to_string(mode);
  r.n_items = items.size();
  const auto f = filter_items(items);
  r.n_ppl_items = f.ppl_set.size();
  r.n_acc_items = f.acc_set.size();
  r.items.resize(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) r.items[i].id = items[i].item.id;
  const std::set<std::size_t> acc(f.acc_set.begin(), f.acc_set.end());
  double nll = 0.0, rr = 0.0;
  std::size_t tokens = 0, hits = 0;
  for (auto i : f.ppl_set) {
    const auto& it = items[i];
    auto& d = r.items[i];
    d.in_ppl_set = true;
    d.in_acc_set = acc.count(i) > 0;
    const auto ppl = option_perplexities(scorer, it);
    const auto c = answer_nll(scorer, it.steps[it.item.correct]);
    nll += c.nll;
    tokens += c.tokens;
    d.correct_ppl = c.perplexity();
    for (const auto& [o, v] : ppl)
      if (o != it.item.correct && !(v >= d.best_incorrect_ppl)) d.best_incorrect_ppl = v;
    d.reciprocal_rank = reciprocal_rank(scorer, it, mode, ppl);
    rr += d.reciprocal_rank;
    if (d.in_acc_set) {
      d.correct = item_correct(ppl, it.item.correct);
      hits += d.correct;
    }
  }
  if (tokens > 0) {
    r.perplexity = std::exp(nll / static_cast<double>(tokens));
    r.mrr = rr / static_cast<double>(f.ppl_set.size());
  }
  if (!f.acc_set.empty()) r.accuracy = static_cast<double>(hits) / static_cast<double>(f.acc_set.size());
  return r;
}

/// The 1/T values swept per method; on-the-fly mixing uses w = 1/T <= 1 only.
inline std::vector<double> inverse_temperature_grid(bool mixing_only = false) {
  std::vector<double> g = {0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5,
                           0.55, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0};
  if (mixing_only) std::erase_if(g, [](double v) { return v > 1.0; });
  return g;
}

// ---- obvious blindness ----

/// Per-model probabilities of a few tokens at one context, smallest model first.
struct BlindnessScenario {
  std::vector<std::string> tokens;
  std::vector<double> log_sizes;
  std::vector<std::vector<double>> probs;  // [model][token]
};

/// "A" rises toward 0.7 and is already likely under the amateur; "B" rises
/// from ~0 toward 0.2; a filler token takes the rest.
inline BlindnessScenario default_blindness_scenario() {
  BlindnessScenario s;
  s.tokens = {"A", "B", "filler"};
  s.log_sizes = log_spaced_sizes(7.0e7, 6.9e9, 5);
  const double s0 = s.log_sizes.front();
  for (double ls : s.log_sizes) {
    const double x = ls - s0;
    const double a = 0.7 - 0.4 * std::exp(-0.6 * x);
    const double b = 0.2 - 0.199 * std::exp(-0.6 * x);
    s.probs.push_back({a, b, 1.0 - a - b});
  }
  return s;
}

struct BlindnessReport {
  std::size_t elm_argmax = 0;
  std::size_t cd_argmax = 0;
  std::size_t apd_argmax = 0;
  std::vector<double> cd_probs;
  std::vector<double> apd_probs;
  std::vector<double> asymptotes;
};

/// CD at temperature T against APD whose amateur is the oracle
/// l_alm' = T (l_elm - log AP), so that the APD output is the normalised
/// fitted asymptotes.
inline BlindnessReport obvious_blindness_probe(const BlindnessScenario& sc, double temperature = 1.0,
                                               const FitOptions& opt = {}) {
  require(sc.probs.size() >= 3 && sc.probs.size() == sc.log_sizes.size(), "scenario needs >= 3 models with sizes");
  const std::size_t n = sc.probs.front().size();
  std::vector<double> l_elm, l_alm;
  for (std::size_t t = 0; t < n; ++t) {
    l_elm.push_back(std::log(sc.probs.back()[t]));
    l_alm.push_back(std::log(sc.probs.front()[t]));
  }
  BlindnessReport r;
  r.elm_argmax = argmax(sc.probs.back());
  const DecodeConfig cfg{temperature, 0.1, std::nullopt};
  r.cd_probs = cd_distribution(l_elm, l_alm, cfg);
  r.cd_argmax = argmax(r.cd_probs);
  std::vector<double> l_alm_prime;
  for (std::size_t t = 0; t < n; ++t) {
    std::vector<double> curve;
    for (const auto& row : sc.probs) curve.push_back(row[t]);
    const double ap = fit_curve(curve, sc.log_sizes, opt).params.ap;
    r.asymptotes.push_back(ap);
    l_alm_prime.push_back(temperature * (l_elm[t] - std::log(std::max(ap, 1e-12))));
  }
  r.apd_probs = apd_distribution(l_elm, l_alm_prime, cfg);
  r.apd_argmax = argmax(r.apd_probs);
  return r;
}

}  // namespace apd
