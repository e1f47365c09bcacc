#pragma once

// A toy language whose next-token distribution is known exactly, used for
// end-to-end experiments: logits are a Zipfian unigram bias plus low-rank
// interactions with the previous two words.

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "apd/common.hpp"
#include "apd/evaluation.hpp"
#include "apd/vocab.hpp"

namespace apd {

struct SyntheticConfig {
  std::size_t words = 200;
  std::size_t rank = 8;
  double unigram_scale = 1.0;  // weight of the Zipf prior
  double prev1_scale = 3.0;    // interaction with the previous word
  double prev2_scale = 1.5;    // interaction with the word before that
  std::size_t line_length = 24;
  std::uint64_t seed = 7;
};

class SyntheticLanguage {
 public:
  explicit SyntheticLanguage(const SyntheticConfig& cfg) : cfg_(cfg) {
    require(cfg.words >= 4 && cfg.rank >= 1 && cfg.line_length >= 2, "invalid synthetic language config");
    Rng rng(derive_seed(cfg.seed, 0x5e7));
    const std::size_t n = cfg.words;
    bias_.resize(n);
    for (std::size_t t = 0; t < n; ++t) bias_[t] = -cfg.unigram_scale * std::log(static_cast<double>(t + 1));
    auto gauss = [&](std::size_t rows) {
      std::vector<std::vector<double>> m(rows, std::vector<double>(cfg.rank));
      const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.rank));
      for (auto& r : m)
        for (auto& v : r) v = normal01(rng) * sd;
      return m;
    };
    // row `words` stands for the start-of-line position
    p1_ = gauss(n + 1);
    q1_ = gauss(n);
    p2_ = gauss(n + 1);
    q2_ = gauss(n);
  }

  const SyntheticConfig& config() const { return cfg_; }
  std::size_t words() const { return cfg_.words; }

  static std::string word(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "w%03zu", i);
    return buf;
  }

  /// True next-word distribution after (prev2, prev1); -1 marks line start.
  std::vector<double> next_distribution(int prev2, int prev1) const {
    const auto& a = p2_[prev2 < 0 ? cfg_.words : static_cast<std::size_t>(prev2)];
    const auto& b = p1_[prev1 < 0 ? cfg_.words : static_cast<std::size_t>(prev1)];
    std::vector<double> z(cfg_.words);
    for (std::size_t t = 0; t < cfg_.words; ++t) {
      double d1 = 0.0, d2 = 0.0;
      for (std::size_t r = 0; r < cfg_.rank; ++r) {
        d1 += b[r] * q1_[t][r];
        d2 += a[r] * q2_[t][r];
      }
      z[t] = bias_[t] + cfg_.prev1_scale * d1 * std::sqrt(static_cast<double>(cfg_.rank)) +
             cfg_.prev2_scale * d2 * std::sqrt(static_cast<double>(cfg_.rank));
    }
    return softmax(z);
  }

  std::vector<int> sample_line(Rng& rng, std::size_t length) const {
    std::vector<int> out;
    int p2 = -1, p1 = -1;
    for (std::size_t i = 0; i < length; ++i) {
      const auto dist = next_distribution(p2, p1);
      const int w = static_cast<int>(sample_index(dist, rng));
      out.push_back(w);
      p2 = p1;
      p1 = w;
    }
    return out;
  }

  std::string render(const std::vector<int>& ids) const {
    std::string s;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) s += ' ';
      s += word(static_cast<std::size_t>(ids[i]));
    }
    return s;
  }

  std::vector<std::string> sample_corpus(std::size_t lines, std::uint64_t seed) const {
    Rng rng(derive_seed(seed, 0xc0));
    std::vector<std::string> out;
    for (std::size_t i = 0; i < lines; ++i) out.push_back(render(sample_line(rng, cfg_.line_length)));
    return out;
  }

  /// Mean entropy (nats) of the next-word distribution along sampled text.
  double mean_entropy(std::size_t samples, std::uint64_t seed) const {
    Rng rng(derive_seed(seed, 0xe7));
    double h = 0.0;
    std::size_t n = 0;
    while (n < samples) {
      const auto line = sample_line(rng, cfg_.line_length);
      int p2 = -1, p1 = -1;
      for (int w : line) {
        for (double p : next_distribution(p2, p1))
          if (p > 0.0) h -= p * std::log(p);
        ++n;
        p2 = p1;
        p1 = w;
      }
    }
    return h / static_cast<double>(n);
  }

  static std::size_t sample_index(const std::vector<double>& dist, Rng& rng) {
    const double u = uniform01(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < dist.size(); ++i) {
      acc += dist[i];
      if (u < acc) return i;
    }
    return dist.size() - 1;
  }

 private:
  SyntheticConfig cfg_;
  std::vector<double> bias_;
  std::vector<std::vector<double>> p1_, q1_, p2_, q2_;
};

/// QA items: a prompt of sampled text, the gold answer drawn from the true
/// next-word distribution, and distractors drawn from the true top words.
inline std::vector<QAItem> make_synthetic_qa(const SyntheticLanguage& lang, const Vocabulary& vocab,
                                             std::size_t n_items, std::size_t n_distractors, std::uint64_t seed) {
  require(n_distractors >= 1, "need at least one distractor");
  Rng rng(derive_seed(seed, 0x9a));
  std::vector<QAItem> out;
  auto id_of = [&](int w) { return vocab.lookup(SyntheticLanguage::word(static_cast<std::size_t>(w))); };
  for (std::size_t i = 0; i < n_items; ++i) {
    const std::size_t plen = 2 + uniform_index(rng, lang.config().line_length - 2);
    const auto line = lang.sample_line(rng, plen);
    const int p2 = line.size() >= 2 ? line[line.size() - 2] : -1;
    const int p1 = line.back();
    const auto dist = lang.next_distribution(p2, p1);
    const auto answer = static_cast<int>(SyntheticLanguage::sample_index(dist, rng));
    QAItem q;
    q.id = i;
    for (int w : line) q.prompt.push_back(id_of(w));
    q.options.push_back({id_of(answer)});
    const auto order = rank_desc(dist);
    std::vector<std::size_t> pool;
    for (std::size_t j = 0; j < std::min<std::size_t>(20, order.size()); ++j)
      if (static_cast<int>(order[j]) != answer) pool.push_back(order[j]);
    shuffle(pool, rng);
    for (std::size_t j = 0; j < std::min(n_distractors, pool.size()); ++j)
      q.options.push_back({id_of(static_cast<int>(pool[j]))});
    // place the gold answer at a random position
    const std::size_t pos = uniform_index(rng, q.options.size());
    std::swap(q.options[0], q.options[pos]);
    q.correct = pos;
    out.push_back(std::move(q));
  }
  return out;
}

}  // namespace apd
