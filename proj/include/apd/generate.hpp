#pragma once

#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "apd/cd.hpp"
#include "apd/sampling.hpp"
#include "apd/tiny_lm.hpp"
#include "apd/vocab.hpp"

namespace apd {

enum class DistributionSource { Elm, Cd, Apd };

inline std::string to_string(DistributionSource s) {
  switch (s) {
    case DistributionSource::Elm: return "elm";
    case DistributionSource::Cd: return "cd";
    case DistributionSource::Apd: return "apd";
  }
  return "?";
}

inline DistributionSource source_from_string(const std::string& s) {
  if (s == "elm") return DistributionSource::Elm;
  if (s == "cd") return DistributionSource::Cd;
  if (s == "apd") return DistributionSource::Apd;
  throw InvalidArgument("unknown distribution source '" + s + "'");
}

/// Models a decoder can draw from. `alm_prime` is only needed for APD.
struct DecodeModels {
  const TinyLM* elm = nullptr;
  const TinyLM* alm = nullptr;
  const TinyLM* alm_prime = nullptr;
};

struct NextToken {
  std::vector<double> probs;      // modified distribution
  std::vector<double> elm_probs;  // expert distribution (alpha-mask source)
};

inline NextToken next_distribution(DistributionSource src, const DecodeModels& m, std::span<const TokenId> history,
                                   const DecodeConfig& cfg) {
  require(m.elm != nullptr, "decoding needs an expert model");
  const auto elm = m.elm->logits(m.elm->fit_window(history));
  NextToken out;
  out.elm_probs = softmax(elm);
  switch (src) {
    case DistributionSource::Elm: out.probs = out.elm_probs; break;
    case DistributionSource::Cd: {
      require(m.alm != nullptr, "CD needs an amateur model");
      out.probs = cd_distribution(elm, m.alm->logits(m.alm->fit_window(history)), cfg);
      break;
    }
    case DistributionSource::Apd: {
      require(m.alm_prime != nullptr, "APD needs the fine-tuned amateur");
      out.probs = apd_distribution(elm, m.alm_prime->logits(m.alm_prime->fit_window(history)), cfg);
      break;
    }
  }
  return out;
}

struct GenerationRequest {
  std::uint64_t prompt_id = 0;
  TokenSeq prompt;
  std::size_t max_new_tokens = 32;
  std::size_t continuations = 8;
  DistributionSource source = DistributionSource::Elm;
};

/// Autoregressive sampling; continuation i uses its own rng stream derived
/// from (sampler seed, prompt id, i). Long prompts are left-truncated to the
/// model window.
inline std::vector<TokenSeq> generate(const GenerationRequest& req, const DecodeModels& models,
                                      const DecodeConfig& decode, const SamplerConfig& sampler) {
  require(req.continuations >= 1, "at least one continuation is required");
  decode.validate();
  sampler.validate();
  std::vector<TokenSeq> out;
  for (std::size_t c = 0; c < req.continuations; ++c) {
    Rng rng(derive_seed(sampler.seed, req.prompt_id, c));
    TokenSeq history = req.prompt;
    TokenSeq cont;
    for (std::size_t t = 0; t < req.max_new_tokens; ++t) {
      const auto nt = next_distribution(req.source, models, history, decode);
      const auto dist = compose_filters(nt.probs, sampler, nt.elm_probs);
      const auto tok = sample_token(dist, rng);
      cont.push_back(tok);
      history.push_back(tok);
    }
    out.push_back(std::move(cont));
  }
  return out;
}

inline void write_generations(std::ostream& out, const GenerationRequest& req, const std::vector<TokenSeq>& conts,
                              const Vocabulary& vocab, const nlohmann::json& extra = nlohmann::json::object()) {
  for (std::size_t i = 0; i < conts.size(); ++i) {
    nlohmann::json j = {{"prompt_id", req.prompt_id},
                        {"continuation_idx", i},
                        {"token_ids", conts[i]},
                        {"text", vocab.detokenize(conts[i])}};
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    out << j.dump() << "\n";
  }
}

}  // namespace apd
