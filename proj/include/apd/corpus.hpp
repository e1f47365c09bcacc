#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "apd/vocab.hpp"

namespace apd {

/// Tokenized corpus: one id sequence per non-empty text line.
struct Corpus {
  std::vector<TokenSeq> lines;
  std::string source_hash;

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& l : lines) n += l.size();
    return n;
  }
};

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open corpus file " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline std::string hash_lines(const std::vector<std::string>& lines) {
  Fnv1a h;
  for (const auto& l : lines) {
    h.update(l);
    h.update("\n", 1);
  }
  return h.hex();
}

inline Corpus make_corpus(const std::vector<std::string>& text_lines, const Vocabulary& vocab) {
  Corpus c;
  c.source_hash = hash_lines(text_lines);
  for (const auto& l : text_lines) {
    auto ids = vocab.tokenize(l);
    if (!ids.empty()) c.lines.push_back(std::move(ids));
  }
  return c;
}

struct CorpusSplit {
  Corpus train;
  Corpus validation;
};

/// Line-level split; the assignment depends only on (source hash, ratio, seed).
inline CorpusSplit split_corpus(const Corpus& corpus, double validation_ratio, std::uint64_t seed) {
  require(validation_ratio >= 0.0 && validation_ratio < 1.0, "validation ratio must be in [0,1)");
  std::vector<std::size_t> order(corpus.lines.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, std::stoull(corpus.source_hash.empty() ? "0" : corpus.source_hash, nullptr, 16)));
  shuffle(order, rng);
  const auto n_val = static_cast<std::size_t>(std::floor(validation_ratio * static_cast<double>(order.size())));
  CorpusSplit s;
  s.train.source_hash = s.validation.source_hash = corpus.source_hash;
  std::vector<bool> is_val(order.size(), false);
  for (std::size_t i = 0; i < n_val; ++i) is_val[order[i]] = true;
  for (std::size_t i = 0; i < corpus.lines.size(); ++i)
    (is_val[i] ? s.validation : s.train).lines.push_back(corpus.lines[i]);
  return s;
}

/// One next-token prediction instance: the k ids before position `pos`
/// (left-padded) and the id at `pos`.
struct Context {
  std::uint64_t id = 0;
  TokenSeq window;
  TokenId target = 0;
};

inline TokenSeq left_window(std::span<const TokenId> history, std::size_t k) {
  TokenSeq w(k, Vocabulary::kPad);
  const std::size_t n = std::min(k, history.size());
  for (std::size_t i = 0; i < n; ++i) w[k - n + i] = history[history.size() - n + i];
  return w;
}

/// Every position of every line is a context, in corpus order.
inline std::vector<Context> enumerate_contexts(const Corpus& corpus, std::size_t k) {
  std::vector<Context> out;
  std::uint64_t id = 0;
  for (const auto& line : corpus.lines) {
    for (std::size_t pos = 0; pos < line.size(); ++pos) {
      Context c;
      c.id = id++;
      c.window = left_window(std::span<const TokenId>(line.data(), pos), k);
      c.target = line[pos];
      out.push_back(std::move(c));
    }
  }
  return out;
}

}  // namespace apd
