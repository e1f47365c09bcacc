#pragma once

// Run configuration: one JSON document, defaults merged with a user file and
// then with dotted-path overrides such as --train.lr=1e-4.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "apd/apd_train.hpp"
#include "apd/cd.hpp"
#include "apd/curves.hpp"
#include "apd/family.hpp"
#include "apd/sampling.hpp"
#include "apd/traces.hpp"

namespace apd {

/// Bad configuration or paths; the CLI maps it to exit code 2.
class ConfigError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

inline nlohmann::json default_config() {
  using nlohmann::json;
  return json{
      {"seed", 0},
      {"threads", 1},
      {"paths",
       {{"corpus", ""},
        {"trace_corpus", ""},
        {"family_dir", ""},
        {"traces", ""},
        {"checkpoint", ""},
        {"prompts", ""},
        {"qa", ""},
        {"generations", ""},
        {"output", ""},
        {"reports", ""}}},
      {"vocab", {{"mode", "char"}}},
      {"family",
       {{"sizes",
         json::array({json{{"embed", 8}, {"hidden1", 16}, {"hidden2", 16}},
                      json{{"embed", 16}, {"hidden1", 64}, {"hidden2", 64}},
                      json{{"embed", 32}, {"hidden1", 256}, {"hidden2", 256}},
                      json{{"embed", 64}, {"hidden1", 1024}, {"hidden2", 1024}}})},
        {"window", 3},
        {"epochs", 3},
        {"batch_size", 32},
        {"lr", 1e-3},
        {"lr_reference_width", 64},
        {"optimizer", "adamw"},
        {"weight_decay", 0.0},
        {"validation_ratio", 0.1}}},
      {"traces", {{"n_top", 20}, {"n_mid", 5}, {"n_tail", 5}, {"mid_end", 100}, {"batch", 256}}},
      {"train",
       {{"lambda2", 10.0},
        {"lambda3", 0.8},
        {"epochs", 5},
        {"lr", 1e-4},
        {"batch_size", 64},
        {"warmup", 100},
        {"weight_decay", 0.01},
        {"mlp_hidden", 100},
        {"dropout", 0.5}}},
      {"fit",
       {{"iterations", 400},
        {"lr", 1e-2},
        {"lambda2", 10.0},
        {"beta1", 0.8},
        {"beta2", 0.9},
        {"max_records", 0}}},
      {"decode", {{"temperature", 1.0}, {"alpha", 0.1}}},
      {"sampler", {{"method", "none"}, {"p", 0.9}, {"k", 20}, {"alpha", 0.1}, {"temperature", 1.0}}},
      {"generate", {{"max_new_tokens", 32}, {"continuations", 8}, {"sources", json::array({"elm", "cd", "apd"})}}},
      {"evaluate",
       {{"methods", json::array({"elm", "cd", "apd"})},
        {"mrr_mode", "token"},
        {"top_k", 20},
        {"dist_n", json::array({1, 2, 3})}}},
      {"theorem", {{"configs", 200}, {"temperatures", json::array({1.5, 2.0, 4.0, 10.0})}}},
      {"synthetic",
       {{"words", 200},
        {"rank", 8},
        {"unigram_scale", 1.0},
        {"prev1_scale", 3.0},
        {"prev2_scale", 1.5},
        {"line_length", 24},
        {"lines", 2000},
        {"trace_lines", 500},
        {"qa_items", 500},
        {"distractors", 3}}}};
}

namespace detail {

inline void check_known_keys(const nlohmann::json& given, const nlohmann::json& schema, const std::string& prefix) {
  if (!given.is_object()) return;
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!schema.contains(it.key())) throw ConfigError("unknown config key '" + path + "'");
    if (schema[it.key()].is_object()) {
      if (!it.value().is_object()) throw ConfigError("config key '" + path + "' must be an object");
      check_known_keys(it.value(), schema[it.key()], path);
    }
  }
}

/// Values are parsed as JSON when possible, otherwise kept as strings.
inline nlohmann::json parse_override_value(const std::string& raw) {
  auto j = nlohmann::json::parse(raw, nullptr, false);
  return j.is_discarded() ? nlohmann::json(raw) : j;
}

}  // namespace detail

/// Applies "a.b.c=value" to `cfg`; the path must already exist.
inline void apply_override(nlohmann::json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  nlohmann::json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError("config key '" + key + "' is a section, not a value");
  *node = detail::parse_override_value(assignment.substr(eq + 1));
}

/// defaults <- file <- overrides <- APD_SEED.
inline nlohmann::json resolve_config(const std::string& file, const std::vector<std::string>& overrides) {
  auto cfg = default_config();
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open config file " + file);
    auto user = nlohmann::json::parse(in, nullptr, false);
    if (user.is_discarded()) throw ConfigError("config file " + file + " is not valid JSON");
    detail::check_known_keys(user, cfg, "");
    cfg.merge_patch(user);
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  if (const char* env = std::getenv("APD_SEED")) {
    try {
      cfg["seed"] = std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("APD_SEED is not an unsigned integer: ") + env);
    }
  }
  return cfg;
}

template <typename T>
T cfg_get(const nlohmann::json& cfg, const std::string& dotted) {
  const nlohmann::json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string part = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->contains(part)) throw ConfigError("missing config key '" + dotted + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  try {
    return node->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + dotted + "' has the wrong type");
  }
}

inline std::filesystem::path cfg_path(const nlohmann::json& cfg, const std::string& key, bool must_exist) {
  const auto p = cfg_get<std::string>(cfg, "paths." + key);
  if (p.empty()) throw ConfigError("paths." + key + " is not set");
  if (must_exist && !std::filesystem::exists(p)) throw ConfigError("paths." + key + " does not exist: " + p);
  return p;
}

inline std::vector<SizeSpec> size_specs(const nlohmann::json& cfg) {
  std::vector<SizeSpec> out;
  for (const auto& s : cfg.at("family").at("sizes")) {
    SizeSpec spec;
    spec.embed = s.value("embed", spec.embed);
    spec.hidden1 = s.value("hidden1", spec.hidden1);
    spec.hidden2 = s.value("hidden2", spec.hidden2);
    out.push_back(spec);
  }
  return out;
}

inline FamilyTrainConfig family_train_config(const nlohmann::json& cfg) {
  FamilyTrainConfig c;
  c.window = cfg_get<std::size_t>(cfg, "family.window");
  c.epochs = cfg_get<std::size_t>(cfg, "family.epochs");
  c.batch_size = cfg_get<std::size_t>(cfg, "family.batch_size");
  c.lr = cfg_get<double>(cfg, "family.lr");
  c.lr_reference_width = cfg_get<std::size_t>(cfg, "family.lr_reference_width");
  c.optimizer.kind = optimizer_from_string(cfg_get<std::string>(cfg, "family.optimizer"));
  c.optimizer.weight_decay = cfg_get<double>(cfg, "family.weight_decay");
  c.validation_ratio = cfg_get<double>(cfg, "family.validation_ratio");
  c.threads = cfg_get<std::size_t>(cfg, "threads");
  return c;
}

inline CandidateLayout candidate_layout(const nlohmann::json& cfg) {
  CandidateLayout l;
  l.n_top = cfg_get<std::size_t>(cfg, "traces.n_top");
  l.n_mid = cfg_get<std::size_t>(cfg, "traces.n_mid");
  l.n_tail = cfg_get<std::size_t>(cfg, "traces.n_tail");
  l.mid_end = cfg_get<std::size_t>(cfg, "traces.mid_end");
  return l;
}

inline TrainConfig apd_train_config(const nlohmann::json& cfg) {
  TrainConfig c;
  c.lambda2 = cfg_get<double>(cfg, "train.lambda2");
  c.lambda3 = cfg_get<double>(cfg, "train.lambda3");
  c.epochs = cfg_get<std::size_t>(cfg, "train.epochs");
  c.lr = cfg_get<double>(cfg, "train.lr");
  c.batch_size = cfg_get<std::size_t>(cfg, "train.batch_size");
  c.warmup = cfg_get<std::size_t>(cfg, "train.warmup");
  c.weight_decay = cfg_get<double>(cfg, "train.weight_decay");
  c.mlp_hidden = cfg_get<std::size_t>(cfg, "train.mlp_hidden");
  c.dropout = cfg_get<double>(cfg, "train.dropout");
  c.seed = cfg_get<std::uint64_t>(cfg, "seed");
  return c;
}

inline FitOptions fit_options(const nlohmann::json& cfg) {
  FitOptions o;
  o.iterations = cfg_get<std::size_t>(cfg, "fit.iterations");
  o.lr = cfg_get<double>(cfg, "fit.lr");
  o.lambda2 = cfg_get<double>(cfg, "fit.lambda2");
  o.beta1 = cfg_get<double>(cfg, "fit.beta1");
  o.beta2 = cfg_get<double>(cfg, "fit.beta2");
  return o;
}

inline DecodeConfig decode_config(const nlohmann::json& cfg) {
  DecodeConfig d;
  d.temperature = cfg_get<double>(cfg, "decode.temperature");
  d.alpha = cfg_get<double>(cfg, "decode.alpha");
  d.validate();
  return d;
}

inline SamplerConfig sampler_config(const nlohmann::json& cfg) {
  SamplerConfig s;
  s.method = filter_method_from_string(cfg_get<std::string>(cfg, "sampler.method"));
  s.p = cfg_get<double>(cfg, "sampler.p");
  s.k = cfg_get<std::size_t>(cfg, "sampler.k");
  s.alpha = cfg_get<double>(cfg, "sampler.alpha");
  s.temperature = cfg_get<double>(cfg, "sampler.temperature");
  s.seed = cfg_get<std::uint64_t>(cfg, "seed");
  s.validate();
  return s;
}

}  // namespace apd
