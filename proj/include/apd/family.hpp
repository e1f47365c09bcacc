#pragma once

// A size-ordered family of TinyLMs trained on one corpus with one data order.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "apd/corpus.hpp"
#include "apd/tiny_lm.hpp"

namespace apd {

struct SizeSpec {
  std::size_t embed = 16;
  std::size_t hidden1 = 32;
  std::size_t hidden2 = 32;
};

struct FamilyTrainConfig {
  std::size_t window = 3;
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  // members wider than this train at lr * reference / hidden1 (0 disables);
  // wide members overfit or destabilise at the rate that suits narrow ones
  std::size_t lr_reference_width = 64;
  OptimizerConfig optimizer{};
  double validation_ratio = 0.1;
  std::size_t threads = 1;
};

struct MemberRecord {
  std::string name;
  SizeSpec spec;
  std::size_t param_count = 0;
  double log_size = 0.0;
  double heldout_ce = 0.0;
  std::uint64_t init_seed = 0;
};

struct FamilyManifest {
  std::string corpus_hash;
  std::uint64_t seed = 0;  // data order + initialization base seed
  FamilyTrainConfig train;
  std::vector<MemberRecord> members;
};

class ModelFamily {
 public:
  ModelFamily() = default;
  ModelFamily(Vocabulary vocab, std::vector<TinyLM> members, FamilyManifest manifest)
      : vocab_(std::move(vocab)), members_(std::move(members)), manifest_(std::move(manifest)) {
    validate();
  }

  const Vocabulary& vocab() const { return vocab_; }
  const std::vector<TinyLM>& members() const { return members_; }
  const FamilyManifest& manifest() const { return manifest_; }
  std::size_t size() const { return members_.size(); }
  const TinyLM& amateur() const { return members_.front(); }
  const TinyLM& expert() const { return members_.back(); }
  std::size_t window() const { return members_.front().window(); }

  std::vector<double> log_sizes() const {
    std::vector<double> out;
    for (const auto& m : members_) out.push_back(m.log_size());
    return out;
  }

  /// Fingerprint over the vocabulary and every member's weights.
  std::string hash() const {
    Fnv1a h;
    h.update(vocab_.hash());
    for (const auto& m : members_)
      for (auto s : m.params().spans()) h.update(s.data(), s.size_bytes());
    return h.hex();
  }

  void validate() const {
    require(!members_.empty(), "family has no members");
    for (std::size_t i = 0; i < members_.size(); ++i) {
      require(members_[i].vocab_size() == vocab_.size(), "member vocabulary size differs from family vocabulary");
      require(members_[i].window() == members_[0].window(), "members must share one context window");
      if (i > 0)
        require(members_[i].param_count() > members_[i - 1].param_count(),
                "family member sizes must be strictly increasing");
    }
  }

 private:
  Vocabulary vocab_;
  std::vector<TinyLM> members_;
  FamilyManifest manifest_;
};

inline LmShape shape_for(const SizeSpec& s, std::size_t vocab, std::size_t window) {
  return LmShape{vocab, window, s.embed, s.hidden1, s.hidden2};
}

/// Mean cross-entropy (nats) of a model over contexts.
inline double evaluate_cross_entropy(const TinyLM& model, const std::vector<Context>& contexts,
                                     std::size_t batch = 256) {
  if (contexts.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t start = 0; start < contexts.size(); start += batch) {
    const std::size_t end = std::min(contexts.size(), start + batch);
    std::vector<TokenSeq> ctx;
    std::vector<TokenId> tgt;
    for (std::size_t i = start; i < end; ++i) {
      ctx.push_back(contexts[i].window);
      tgt.push_back(contexts[i].target);
    }
    auto c = model.forward(ctx);
    total += TinyLM::cross_entropy(c.logits, tgt, nullptr) * static_cast<double>(end - start);
  }
  return total / static_cast<double>(contexts.size());
}

inline double member_lr(const FamilyTrainConfig& cfg, const SizeSpec& spec) {
  if (cfg.lr_reference_width == 0 || spec.hidden1 <= cfg.lr_reference_width) return cfg.lr;
  return cfg.lr * static_cast<double>(cfg.lr_reference_width) / static_cast<double>(spec.hidden1);
}

/// Trains one model for a fixed number of epochs. The permutation of the
/// training contexts depends only on (seed, epoch), so every member of a
/// family sees the same data order.
inline TinyLM train_member(const LmShape& shape, std::uint64_t init_seed, const std::vector<Context>& train,
                           const FamilyTrainConfig& cfg, double lr, std::uint64_t order_seed,
                           const std::string& label) {
  TinyLM model(shape, init_seed);
  LmTensors grad = LmTensors::zeros(shape);
  auto refs = param_refs(model.params(), grad);
  Optimizer<float> opt(cfg.optimizer, refs);
  std::vector<std::size_t> order(train.size());
  MatF dlogits;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(order_seed, 0x0de7, epoch));
    shuffle(order, rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<TokenSeq> ctx;
      std::vector<TokenId> tgt;
      for (std::size_t i = start; i < end; ++i) {
        ctx.push_back(train[order[i]].window);
        tgt.push_back(train[order[i]].target);
      }
      auto cache = model.forward(ctx);
      const double loss = TinyLM::cross_entropy(cache.logits, tgt, &dlogits);
      if (!std::isfinite(loss))
        throw NumericalError("training diverged for family member " + label + " (epoch " + std::to_string(epoch) +
                             ", batch starting at " + std::to_string(start) + ")");
      grad.set_zero();
      model.backward(cache, dlogits, grad);
      opt.step(refs, lr);
    }
  }
  return model;
}

/// Trains every size spec on the same split and data order. Requires at least
/// three specs with strictly increasing parameter counts.
inline ModelFamily train_family(const Corpus& corpus, const Vocabulary& vocab, const std::vector<SizeSpec>& specs,
                                const FamilyTrainConfig& cfg, std::uint64_t seed,
                                std::ostream* log = nullptr) {
  require(specs.size() >= 3, "a family needs at least 3 size specs, got " + std::to_string(specs.size()));
  require(cfg.window >= 1 && cfg.batch_size >= 1, "window and batch size must be positive");
  std::vector<LmShape> shapes;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    shapes.push_back(shape_for(specs[i], vocab.size(), cfg.window));
    if (i > 0)
      require(shapes[i].param_count() > shapes[i - 1].param_count(),
              "size specs must have strictly increasing parameter counts (member " + std::to_string(i) + ": " +
                  std::to_string(shapes[i].param_count()) + " <= " + std::to_string(shapes[i - 1].param_count()) +
                  ")");
  }
  const auto split = split_corpus(corpus, cfg.validation_ratio, seed);
  const auto train = enumerate_contexts(split.train, cfg.window);
  const auto valid = enumerate_contexts(split.validation, cfg.window);
  require(!train.empty(), "training corpus is empty");

  FamilyManifest manifest;
  manifest.corpus_hash = corpus.source_hash;
  manifest.seed = seed;
  manifest.train = cfg;
  std::vector<TinyLM> models(specs.size());
  std::vector<std::exception_ptr> errors(specs.size());
  const std::uint64_t order_seed = derive_seed(seed, 0x0d);

  auto run = [&](std::size_t i) {
    try {
      models[i] = train_member(shapes[i], derive_seed(seed, 0x1417, i), train, cfg, member_lr(cfg, specs[i]), order_seed,
                               "m" + std::to_string(i) + " (" + std::to_string(shapes[i].param_count()) + " params)");
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(cfg.threads, specs.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      run(i);
      if (log) *log << "trained member " << i << " (" << shapes[i].param_count() << " params)\n";
    }
  } else {
    std::vector<std::jthread> pool;
    std::atomic<std::size_t> next{0};
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < specs.size(); i = next++) run(i);
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  for (std::size_t i = 0; i < specs.size(); ++i) {
    MemberRecord rec;
    rec.name = "m" + std::to_string(i);
    rec.spec = specs[i];
    rec.param_count = models[i].param_count();
    rec.log_size = models[i].log_size();
    rec.heldout_ce = evaluate_cross_entropy(models[i], valid);
    rec.init_seed = derive_seed(seed, 0x1417, i);
    manifest.members.push_back(rec);
  }
  return ModelFamily(vocab, std::move(models), std::move(manifest));
}

// ---- persistence ------------------------------------------------------------

inline nlohmann::json vocab_to_json(const Vocabulary& v) {
  return {{"mode", to_string(v.mode())}, {"tokens", v.tokens()}, {"hash", v.hash()}};
}

inline Vocabulary vocab_from_json(const nlohmann::json& j) {
  auto tokens = j.at("tokens").get<std::vector<std::string>>();
  require(tokens.size() >= 2 && tokens[0] == Vocabulary::kUnkToken && tokens[1] == Vocabulary::kPadToken,
          "vocabulary must start with the reserved tokens");
  Vocabulary v(token_mode_from_string(j.at("mode").get<std::string>()),
               std::vector<std::string>(tokens.begin() + 2, tokens.end()));
  require(v.size() == tokens.size(), "vocabulary contains duplicate tokens");
  if (j.contains("hash")) require(v.hash() == j.at("hash").get<std::string>(), "vocabulary hash mismatch");
  return v;
}

inline nlohmann::json manifest_to_json(const ModelFamily& f) {
  const auto& m = f.manifest();
  nlohmann::json members = nlohmann::json::array();
  for (std::size_t i = 0; i < m.members.size(); ++i) {
    const auto& r = m.members[i];
    members.push_back({{"name", r.name},
                       {"file", r.name + ".bin"},
                       {"embed", r.spec.embed},
                       {"hidden1", r.spec.hidden1},
                       {"hidden2", r.spec.hidden2},
                       {"param_count", r.param_count},
                       {"log_size", r.log_size},
                       {"heldout_ce", r.heldout_ce},
                       {"init_seed", r.init_seed}});
  }
  return {{"format_version", TinyLM::kFormatVersion},
          {"vocab", vocab_to_json(f.vocab())},
          {"corpus_hash", m.corpus_hash},
          {"seed", m.seed},
          {"family_hash", f.hash()},
          {"train",
           {{"window", m.train.window},
            {"epochs", m.train.epochs},
            {"batch_size", m.train.batch_size},
            {"lr", m.train.lr},
            {"lr_reference_width", m.train.lr_reference_width},
            {"optimizer", to_string(m.train.optimizer.kind)},
            {"weight_decay", m.train.optimizer.weight_decay},
            {"momentum", m.train.optimizer.momentum},
            {"validation_ratio", m.train.validation_ratio}}},
          {"members", members}};
}

inline void save_family(const ModelFamily& f, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto vh = f.vocab().hash();
  for (std::size_t i = 0; i < f.size(); ++i) {
    std::ofstream out(dir / (f.manifest().members[i].name + ".bin"), std::ios::binary);
    if (!out) throw InvalidArgument("cannot write to " + dir.string());
    f.members()[i].save(out, vh);
  }
  std::ofstream man(dir / "manifest.json");
  man << manifest_to_json(f).dump(2) << "\n";
}

inline ModelFamily load_family(const std::filesystem::path& dir) {
  std::ifstream man(dir / "manifest.json");
  if (!man) throw InvalidArgument("no manifest.json in " + dir.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(man);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupted manifest: " + std::string(e.what()));
  }
  const auto version = j.at("format_version").get<std::uint32_t>();
  if (version != TinyLM::kFormatVersion)
    throw FormatError("family format version " + std::to_string(version) + " is not supported");
  auto vocab = vocab_from_json(j.at("vocab"));
  FamilyManifest m;
  m.corpus_hash = j.at("corpus_hash").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  const auto& t = j.at("train");
  m.train.window = t.at("window");
  m.train.epochs = t.at("epochs");
  m.train.batch_size = t.at("batch_size");
  m.train.lr = t.at("lr");
  m.train.lr_reference_width = t.at("lr_reference_width");
  m.train.optimizer.kind = optimizer_from_string(t.at("optimizer"));
  m.train.optimizer.weight_decay = t.at("weight_decay");
  m.train.optimizer.momentum = t.at("momentum");
  m.train.validation_ratio = t.at("validation_ratio");
  std::vector<TinyLM> models;
  for (const auto& mj : j.at("members")) {
    MemberRecord r;
    r.name = mj.at("name");
    r.spec = {mj.at("embed"), mj.at("hidden1"), mj.at("hidden2")};
    r.param_count = mj.at("param_count");
    r.log_size = mj.at("log_size");
    r.heldout_ce = mj.at("heldout_ce");
    r.init_seed = mj.at("init_seed");
    const auto path = dir / mj.at("file").get<std::string>();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidArgument("missing model file " + path.string());
    auto model = TinyLM::load(in, vocab.hash(), path.string());
    if (model.count_scalars() != r.param_count)
      throw FormatError(path.string() + ": parameter count " + std::to_string(model.count_scalars()) +
                        " does not match manifest " + std::to_string(r.param_count));
    models.push_back(std::move(model));
    m.members.push_back(r);
  }
  ModelFamily f(std::move(vocab), std::move(models), std::move(m));
  if (j.contains("family_hash") && j.at("family_hash").get<std::string>() != f.hash())
    throw FormatError("family hash in manifest does not match the stored weights");
  return f;
}

}  // namespace apd
