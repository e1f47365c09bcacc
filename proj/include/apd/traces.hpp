#pragma once

// Candidate sets and per-model probability traces over a corpus, stored as
// JSON Lines: one header line, then one record per context.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "apd/family.hpp"

namespace apd {

enum class Provenance { Top, Mid, Tail };

inline std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::Top: return "top";
    case Provenance::Mid: return "mid";
    case Provenance::Tail: return "tail";
  }
  return "?";
}

inline Provenance provenance_from_string(const std::string& s) {
  if (s == "top") return Provenance::Top;
  if (s == "mid") return Provenance::Mid;
  if (s == "tail") return Provenance::Tail;
  throw InvalidArgument("unknown provenance '" + s + "'");
}

/// Sizes of the three candidate bands: the n_top most probable ELM tokens,
/// n_mid sampled from ranks (n_top, mid_end], n_tail sampled beyond mid_end.
struct CandidateLayout {
  std::size_t n_top = 20;
  std::size_t n_mid = 5;
  std::size_t n_tail = 5;
  std::size_t mid_end = 100;

  bool operator==(const CandidateLayout&) const = default;
};

struct CandidateSet {
  std::uint64_t ctx_id = 0;
  std::vector<TokenId> tokens;
  std::vector<Provenance> provenance;

  std::size_t size() const { return tokens.size(); }
};

namespace detail {

// Draws `count` distinct entries of `band` (token ids) with probability
// proportional to `probs`, without replacement; uniform when all weights are 0.
inline std::vector<TokenId> sample_band(std::vector<std::size_t> band, std::span<const double> probs, std::size_t count,
                                        Rng& rng) {
  std::vector<TokenId> out;
  while (out.size() < count && !band.empty()) {
    double total = 0.0;
    for (auto t : band) total += probs[t];
    std::size_t pick = band.size() - 1;
    if (total > 0.0) {
      const double u = uniform01(rng) * total;
      double acc = 0.0;
      for (std::size_t j = 0; j < band.size(); ++j) {
        acc += probs[band[j]];
        if (u < acc) {
          pick = j;
          break;
        }
      }
    } else {
      pick = uniform_index(rng, band.size());
    }
    out.push_back(static_cast<TokenId>(band[pick]));
    band.erase(band.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  return out;
}

}  // namespace detail

/// Top tokens of the ELM distribution followed by probability-weighted samples
/// from the mid and tail rank bands. Deterministic given the seed.
inline CandidateSet build_candidate_set(std::span<const double> elm_probs, const CandidateLayout& layout,
                                        std::uint64_t seed) {
  require(!elm_probs.empty(), "candidate set from an empty distribution");
  const auto order = rank_desc(elm_probs);
  CandidateSet cs;
  const std::size_t V = elm_probs.size();
  if (V <= layout.n_top) {
    for (auto t : order) {
      cs.tokens.push_back(static_cast<TokenId>(t));
      cs.provenance.push_back(Provenance::Top);
    }
    return cs;
  }
  for (std::size_t r = 0; r < layout.n_top; ++r) {
    cs.tokens.push_back(static_cast<TokenId>(order[r]));
    cs.provenance.push_back(Provenance::Top);
  }
  Rng rng(seed);
  const std::size_t mid_end = std::min(V, std::max(layout.mid_end, layout.n_top));
  std::vector<std::size_t> mid(order.begin() + static_cast<std::ptrdiff_t>(layout.n_top),
                               order.begin() + static_cast<std::ptrdiff_t>(mid_end));
  std::vector<std::size_t> tail(order.begin() + static_cast<std::ptrdiff_t>(mid_end), order.end());
  for (auto t : detail::sample_band(std::move(mid), elm_probs, layout.n_mid, rng)) {
    cs.tokens.push_back(t);
    cs.provenance.push_back(Provenance::Mid);
  }
  for (auto t : detail::sample_band(std::move(tail), elm_probs, layout.n_tail, rng)) {
    cs.tokens.push_back(t);
    cs.provenance.push_back(Provenance::Tail);
  }
  return cs;
}

struct TraceRecord {
  std::uint64_t ctx_id = 0;
  TokenSeq ctx;
  std::vector<TokenId> cands;
  std::vector<Provenance> prov;
  std::vector<std::vector<float>> probs;  // [model][candidate], normalised over the candidates
  std::vector<float> l_alm;
  std::vector<float> l_elm;

  std::size_t n_models() const { return probs.size(); }
  std::size_t n_cands() const { return cands.size(); }

  /// Probabilities of candidate j across models, smallest model first.
  std::vector<double> curve(std::size_t j) const {
    std::vector<double> out;
    for (const auto& row : probs) out.push_back(static_cast<double>(row[j]));
    return out;
  }

  bool operator==(const TraceRecord&) const = default;
};

struct TraceHeader {
  std::uint32_t version = 1;
  std::string family_hash;
  std::size_t n_models = 0;
  std::vector<double> log_sizes;
  CandidateLayout layout;
  std::uint64_t seed = 0;

  bool operator==(const TraceHeader&) const = default;
};

struct TraceFile {
  TraceHeader header;
  std::vector<TraceRecord> records;
  std::vector<std::string> diagnostics;  // non-fatal issues found while reading

  bool operator==(const TraceFile& o) const { return header == o.header && records == o.records; }
};

/// One record from the logits of every family member at a context.
inline TraceRecord make_record(std::uint64_t ctx_id, const TokenSeq& ctx,
                               const std::vector<std::vector<float>>& member_logits, const CandidateLayout& layout,
                               std::uint64_t seed) {
  const auto elm_probs = softmax(member_logits.back());
  auto cs = build_candidate_set(elm_probs, layout, derive_seed(seed, 0xca4d, ctx_id));
  TraceRecord r;
  r.ctx_id = ctx_id;
  r.ctx = ctx;
  r.cands = cs.tokens;
  r.prov = cs.provenance;
  for (const auto& logits : member_logits) {
    const auto p = softmax(logits);
    double z = 0.0;
    for (auto t : r.cands) z += p[static_cast<std::size_t>(t)];
    std::vector<float> row;
    for (auto t : r.cands) row.push_back(static_cast<float>(p[static_cast<std::size_t>(t)] / z));
    r.probs.push_back(std::move(row));
  }
  for (auto t : r.cands) {
    r.l_alm.push_back(member_logits.front()[static_cast<std::size_t>(t)]);
    r.l_elm.push_back(member_logits.back()[static_cast<std::size_t>(t)]);
  }
  return r;
}

/// Runs every family member over every context of the corpus.
inline TraceFile collect_traces(const ModelFamily& family, const Corpus& corpus, const CandidateLayout& layout,
                                std::uint64_t seed, std::size_t batch = 256) {
  require(family.size() >= 3, "trace collection needs a family of at least 3 models");
  TraceFile tf;
  tf.header.family_hash = family.hash();
  tf.header.n_models = family.size();
  tf.header.log_sizes = family.log_sizes();
  tf.header.layout = layout;
  tf.header.seed = seed;
  const auto contexts = enumerate_contexts(corpus, family.window());
  for (std::size_t start = 0; start < contexts.size(); start += batch) {
    const std::size_t end = std::min(contexts.size(), start + batch);
    std::vector<TokenSeq> windows;
    for (std::size_t i = start; i < end; ++i) windows.push_back(contexts[i].window);
    std::vector<MatF> logits;
    for (const auto& m : family.members()) logits.push_back(m.forward(windows).logits);
    for (std::size_t i = start; i < end; ++i) {
      std::vector<std::vector<float>> per_member;
      for (const auto& L : logits) {
        const float* row = L.data() + static_cast<std::ptrdiff_t>((i - start) * family.vocab().size());
        per_member.emplace_back(row, row + family.vocab().size());
      }
      tf.records.push_back(make_record(contexts[i].id, contexts[i].window, per_member, layout, seed));
    }
  }
  return tf;
}

// ---- JSONL persistence ------------------------------------------------------

namespace detail {

template <typename T, typename F>
void write_array(std::ostream& out, const std::vector<T>& v, F&& fmt) {
  out << '[';
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out << ',';
    fmt(out, v[i]);
  }
  out << ']';
}

inline void write_floats(std::ostream& out, const std::vector<float>& v) {
  write_array(out, v, [](std::ostream& o, float x) { o << float_repr(x); });
}

inline std::vector<float> read_floats(const nlohmann::json& j) {
  std::vector<float> out;
  out.reserve(j.size());
  for (const auto& x : j) out.push_back(static_cast<float>(x.get<double>()));
  return out;
}

}  // namespace detail

inline void write_trace_header(std::ostream& out, const TraceHeader& h) {
  out << "{\"version\":" << h.version << ",\"family_hash\":\"" << h.family_hash << "\",\"n_models\":" << h.n_models
      << ",\"log_sizes\":";
  detail::write_array(out, h.log_sizes, [](std::ostream& o, double x) { o << double_repr(x); });
  out << ",\"layout\":{\"n_top\":" << h.layout.n_top << ",\"n_mid\":" << h.layout.n_mid
      << ",\"n_tail\":" << h.layout.n_tail << ",\"mid_end\":" << h.layout.mid_end << "},\"seed\":" << h.seed
      << "}\n";
}

inline void write_trace_record(std::ostream& out, const TraceRecord& r) {
  auto ints = [](std::ostream& o, TokenId x) { o << x; };
  out << "{\"ctx_id\":" << r.ctx_id << ",\"ctx\":";
  detail::write_array(out, r.ctx, ints);
  out << ",\"cands\":";
  detail::write_array(out, r.cands, ints);
  out << ",\"prov\":";
  detail::write_array(out, r.prov, [](std::ostream& o, Provenance p) { o << '"' << to_string(p) << '"'; });
  out << ",\"probs\":";
  detail::write_array(out, r.probs, [](std::ostream& o, const std::vector<float>& row) { detail::write_floats(o, row); });
  out << ",\"l_alm\":";
  detail::write_floats(out, r.l_alm);
  out << ",\"l_elm\":";
  detail::write_floats(out, r.l_elm);
  out << "}\n";
}

inline void write_traces(const TraceFile& tf, std::ostream& out) {
  write_trace_header(out, tf.header);
  for (const auto& r : tf.records) write_trace_record(out, r);
}

inline void write_traces(const TraceFile& tf, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot write trace file " + path.string());
  write_traces(tf, out);
}

/// Parses a trace file. Structural problems raise FormatError with the byte
/// offset of the offending line; a family-hash mismatch against
/// `expected_family_hash` is only recorded in `diagnostics`.
inline TraceFile read_traces(std::istream& in, const std::string& expected_family_hash = "") {
  TraceFile tf;
  std::string line;
  std::uint64_t offset = 0;
  bool have_header = false;
  while (true) {
    const std::uint64_t line_start = offset;
    if (!std::getline(in, line)) break;
    const bool terminated = !in.eof();
    offset += line.size() + (terminated ? 1 : 0);
    if (!terminated) throw FormatError("truncated trace file: last line has no terminating newline", line_start);
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed trace line: ") + e.what(), line_start);
    }
    try {
      if (!have_header) {
        auto& h = tf.header;
        h.version = j.at("version");
        if (h.version != 1) throw FormatError("unsupported trace version " + std::to_string(h.version), line_start);
        h.family_hash = j.at("family_hash");
        h.n_models = j.at("n_models");
        h.log_sizes = j.at("log_sizes").get<std::vector<double>>();
        const auto& l = j.at("layout");
        h.layout = {l.at("n_top"), l.at("n_mid"), l.at("n_tail"), l.value("mid_end", std::size_t{100})};
        h.seed = j.at("seed");
        if (h.log_sizes.size() != h.n_models)
          throw FormatError("header lists " + std::to_string(h.log_sizes.size()) + " log sizes for " +
                                std::to_string(h.n_models) + " models",
                            line_start);
        for (std::size_t i = 1; i < h.log_sizes.size(); ++i)
          if (!(h.log_sizes[i] > h.log_sizes[i - 1]))
            throw FormatError("header log sizes are not strictly increasing", line_start);
        if (!expected_family_hash.empty() && expected_family_hash != h.family_hash)
          tf.diagnostics.push_back("trace family hash " + h.family_hash + " does not match family " +
                                   expected_family_hash);
        have_header = true;
        continue;
      }
      TraceRecord r;
      r.ctx_id = j.at("ctx_id");
      r.ctx = j.at("ctx").get<TokenSeq>();
      r.cands = j.at("cands").get<std::vector<TokenId>>();
      for (const auto& p : j.at("prov")) r.prov.push_back(provenance_from_string(p.get<std::string>()));
      for (const auto& row : j.at("probs")) r.probs.push_back(detail::read_floats(row));
      r.l_alm = detail::read_floats(j.at("l_alm"));
      r.l_elm = detail::read_floats(j.at("l_elm"));
      if (r.probs.size() != tf.header.n_models)
        throw FormatError("record " + std::to_string(r.ctx_id) + " has " + std::to_string(r.probs.size()) +
                              " model rows but the header declares " + std::to_string(tf.header.n_models),
                          line_start);
      const auto n = r.cands.size();
      bool widths_ok = r.prov.size() == n && r.l_alm.size() == n && r.l_elm.size() == n;
      for (const auto& row : r.probs) widths_ok = widths_ok && row.size() == n;
      if (!widths_ok)
        throw FormatError("record " + std::to_string(r.ctx_id) + " has inconsistent candidate widths", line_start);
      tf.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("invalid trace field: ") + e.what(), line_start);
    } catch (const InvalidArgument& e) {
      throw FormatError(e.what(), line_start);
    }
  }
  if (!have_header) throw FormatError("trace file has no header line", 0);
  return tf;
}

inline TraceFile read_traces(const std::filesystem::path& path, const std::string& expected_family_hash = "") {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open trace file " + path.string());
  return read_traces(in, expected_family_hash);
}

}  // namespace apd
