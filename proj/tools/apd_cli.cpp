// apd_cli: train a model family, collect traces, fine-tune the amateur,
// decode and evaluate. Every flag of the form --a.b=value overrides the JSON
// config at that path.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>

#include "apd/apd_train.hpp"
#include "apd/config.hpp"
#include "apd/evaluation.hpp"
#include "apd/family.hpp"
#include "apd/generate.hpp"
#include "apd/on_the_fly.hpp"
#include "apd/synthetic.hpp"
#include "apd/traces.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace apd;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct Common {
  std::string config_file;
  bool force = false;
  bool plot_data = false;
  std::optional<std::size_t> threads;
  std::vector<std::string> overrides;
};

json resolve(const Common& c) {
  auto cfg = resolve_config(c.config_file, c.overrides);
  if (c.threads) cfg["threads"] = *c.threads;
  return cfg;
}

void write_snapshot(const json& cfg, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config snapshot " + path.string());
  out << cfg.dump(2) << "\n";
}

fs::path snapshot_next_to(const fs::path& output) {
  return output.parent_path() / (output.filename().string() + ".config.json");
}

/// Refuses to clobber an existing output unless --force.
void claim_output(const fs::path& p, bool force) {
  if (fs::exists(p) && !force) throw ConfigError(p.string() + " already exists (use --force to overwrite)");
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw ConfigError("cannot write " + p.string());
  return out;
}

/// Tokenizes with the family vocabulary; unknown tokens mean the corpus does
/// not belong to this family.
Corpus corpus_for_family(const fs::path& path, const Vocabulary& vocab) {
  const auto lines = read_lines(path);
  auto corpus = make_corpus(lines, vocab);
  std::size_t unknown = 0;
  for (const auto& line : lines)
    for (const auto& t : split_tokens(line, vocab.mode()))
      if (!vocab.contains(t)) ++unknown;
  if (unknown > 0)
    throw ConfigError(path.string() + " has " + std::to_string(unknown) +
                      " tokens outside the family vocabulary (family/corpus mismatch)");
  return corpus;
}

int cmd_train_family(const Common& c) {
  const auto cfg = resolve(c);
  const auto corpus_path = cfg_path(cfg, "corpus", true);
  const auto dir = cfg_path(cfg, "family_dir", false);
  if (fs::exists(dir) && !fs::is_empty(dir) && !c.force)
    throw ConfigError(dir.string() + " is not empty (use --force to overwrite)");
  const auto lines = read_lines(corpus_path);
  const auto vocab = Vocabulary::build(lines, token_mode_from_string(cfg_get<std::string>(cfg, "vocab.mode")));
  const auto corpus = make_corpus(lines, vocab);
  const auto family = train_family(corpus, vocab, size_specs(cfg), family_train_config(cfg),
                                   cfg_get<std::uint64_t>(cfg, "seed"), &std::cerr);
  save_family(family, dir);
  write_snapshot(cfg, dir / "config.resolved.json");
  std::cout << std::left << std::setw(6) << "member" << std::setw(12) << "params" << std::setw(10) << "log_size"
            << "heldout_ce\n";
  for (const auto& m : family.manifest().members)
    std::cout << std::setw(6) << m.name << std::setw(12) << m.param_count << std::setw(10) << std::setprecision(4)
              << m.log_size << std::setprecision(6) << m.heldout_ce << "\n";
  std::cout << "family_hash " << family.hash() << "\n";
  return kExitOk;
}

int cmd_collect_traces(const Common& c) {
  const auto cfg = resolve(c);
  const auto family = load_family(cfg_path(cfg, "family_dir", true));
  const auto src = cfg_get<std::string>(cfg, "paths.trace_corpus").empty() ? cfg_path(cfg, "corpus", true)
                                                                             : cfg_path(cfg, "trace_corpus", true);
  const auto out = cfg_path(cfg, "traces", false);
  claim_output(out, c.force);
  const auto corpus = corpus_for_family(src, family.vocab());
  const auto tf = collect_traces(family, corpus, candidate_layout(cfg), cfg_get<std::uint64_t>(cfg, "seed"),
                                 cfg_get<std::size_t>(cfg, "traces.batch"));
  write_traces(tf, out);
  write_snapshot(cfg, snapshot_next_to(out));
  double mean = 0.0;
  for (const auto& r : tf.records) mean += static_cast<double>(r.n_cands());
  if (!tf.records.empty()) mean /= static_cast<double>(tf.records.size());
  std::cout << "records " << tf.records.size() << "\nmean_candidates " << mean << "\nfamily_hash "
            << tf.header.family_hash << "\n";
  return kExitOk;
}

int cmd_train_apd(const Common& c) {
  const auto cfg = resolve(c);
  const auto family = load_family(cfg_path(cfg, "family_dir", true));
  const auto traces = read_traces(cfg_path(cfg, "traces", true), family.hash());
  for (const auto& d : traces.diagnostics) std::cerr << "warning: " << d << "\n";
  const auto out = cfg_path(cfg, "checkpoint", false);
  claim_output(out, c.force);
  const auto res = train_alm_prime(traces, family.amateur(), apd_train_config(cfg), family.hash(), &std::cerr);
  save_checkpoint(out, res.alm_prime, res.mlp, family.vocab().hash());
  auto csv = open_out(out.parent_path() / (out.filename().string() + ".loss.csv"));
  write_loss_csv(csv, res.history);
  write_snapshot(cfg, snapshot_next_to(out));
  std::cout << "steps " << res.history.size() << "\n";
  if (!res.history.empty()) std::cout << "final_loss " << res.history.back().loss.total << "\n";
  return kExitOk;
}

int cmd_fit_curves(const Common& c) {
  const auto cfg = resolve(c);
  const auto traces = read_traces(cfg_path(cfg, "traces", true));
  const auto out_path = cfg_path(cfg, "output", false);
  claim_output(out_path, c.force);
  auto out = open_out(out_path);
  const auto opt = fit_options(cfg);
  const auto limit = cfg_get<std::size_t>(cfg, "fit.max_records");
  std::size_t n = 0;
  for (const auto& rec : traces.records) {
    if (limit && n >= limit) break;
    write_curve_dump(out, rec, fit_on_the_fly(rec, traces.header.log_sizes, 0.0, opt).fits);
    ++n;
  }
  write_snapshot(cfg, snapshot_next_to(out_path));
  std::cout << "records_fitted " << n << "\n";
  return kExitOk;
}

struct LoadedModels {
  ModelFamily family;
  std::optional<TinyLM> alm_prime;
};

LoadedModels load_models(const json& cfg, bool need_alm_prime) {
  LoadedModels m{load_family(cfg_path(cfg, "family_dir", true)), std::nullopt};
  if (need_alm_prime) m.alm_prime = load_checkpoint(cfg_path(cfg, "checkpoint", true), m.family.vocab().hash()).alm_prime;
  return m;
}

int cmd_decode(const Common& c) {
  const auto cfg = resolve(c);
  std::vector<DistributionSource> sources;
  for (const auto& s : cfg.at("generate").at("sources")) sources.push_back(source_from_string(s.get<std::string>()));
  const bool need_prime = std::count(sources.begin(), sources.end(), DistributionSource::Apd) > 0;
  const auto prompts = read_lines(cfg_path(cfg, "prompts", true));
  const auto models = load_models(cfg, need_prime);
  const auto out_path = cfg_path(cfg, "output", false);
  claim_output(out_path, c.force);
  auto out = open_out(out_path);
  const auto decode = decode_config(cfg);
  const auto sampler = sampler_config(cfg);
  const DecodeModels dm{&models.family.expert(), &models.family.amateur(),
                        models.alm_prime ? &*models.alm_prime : nullptr};
  std::size_t written = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    for (auto src : sources) {
      GenerationRequest req;
      req.prompt_id = i;
      req.prompt = models.family.vocab().tokenize(prompts[i]);
      req.max_new_tokens = cfg_get<std::size_t>(cfg, "generate.max_new_tokens");
      req.continuations = cfg_get<std::size_t>(cfg, "generate.continuations");
      req.source = src;
      const auto conts = generate(req, dm, decode, sampler);
      write_generations(out, req, conts, models.family.vocab(),
                        {{"source", to_string(src)}, {"sampler", to_string(sampler.method)}});
      written += conts.size();
    }
  }
  write_snapshot(cfg, snapshot_next_to(out_path));
  std::cout << "continuations " << written << "\n";
  return kExitOk;
}

std::vector<QAItem> read_qa(const fs::path& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open QA file " + path.string());
  std::vector<QAItem> items;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("prompt") || !j.contains("options") || !j.contains("correct"))
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed QA item");
    QAItem q;
    q.id = j.value("id", static_cast<std::uint64_t>(items.size()));
    q.prompt = vocab.tokenize(j["prompt"].get<std::string>());
    for (const auto& o : j["options"]) q.options.push_back(vocab.tokenize(o.get<std::string>()));
    q.correct = j["correct"].get<std::size_t>();
    q.validate();
    items.push_back(std::move(q));
  }
  return items;
}

/// Generation JSONL grouped as source -> prompt -> continuations.
std::map<std::string, std::vector<std::vector<TokenSeq>>> read_generations(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open generations file " + path.string());
  std::map<std::string, std::map<std::uint64_t, std::vector<TokenSeq>>> grouped;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw FormatError("malformed generation line in " + path.string());
    grouped[j.value("source", std::string("elm"))][j.at("prompt_id").get<std::uint64_t>()].push_back(
        j.at("token_ids").get<TokenSeq>());
  }
  std::map<std::string, std::vector<std::vector<TokenSeq>>> out;
  for (auto& [src, prompts] : grouped)
    for (auto& [_, conts] : prompts) out[src].push_back(std::move(conts));
  return out;
}

std::string grid_label(double inv_t) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << inv_t;
  return s.str();
}

int cmd_evaluate(const Common& c) {
  const auto cfg = resolve(c);
  std::vector<std::string> methods;
  for (const auto& m : cfg.at("evaluate").at("methods")) methods.push_back(m.get<std::string>());
  for (const auto& m : methods)
    if (m != "elm" && m != "cd" && m != "apd" && m != "apd_fly") throw ConfigError("unknown evaluation method " + m);
  const bool need_prime = std::count(methods.begin(), methods.end(), "apd") > 0;
  const bool need_fly = std::count(methods.begin(), methods.end(), "apd_fly") > 0;
  const auto models = load_models(cfg, need_prime);
  const auto items = read_qa(cfg_path(cfg, "qa", true), models.family.vocab());
  const auto dir = cfg_path(cfg, "reports", false);
  if (fs::exists(dir) && !fs::is_empty(dir) && !c.force)
    throw ConfigError(dir.string() + " is not empty (use --force to overwrite)");
  fs::create_directories(dir);
  const auto mode = mrr_mode_from_string(cfg_get<std::string>(cfg, "evaluate.mrr_mode"));

  auto prepared = prepare_items(items,
                                EvalModels{&models.family.expert(), &models.family.amateur(),
                                           models.alm_prime ? &*models.alm_prime : nullptr, &models.family},
                                cfg_get<std::size_t>(cfg, "evaluate.top_k"));
  if (need_fly) attach_on_the_fly(prepared, models.family.log_sizes(), fit_options(cfg));

  std::map<std::string, std::vector<std::vector<TokenSeq>>> gens;
  if (!cfg_get<std::string>(cfg, "paths.generations").empty()) gens = read_generations(cfg_path(cfg, "generations", true));
  std::vector<std::size_t> ns = cfg.at("evaluate").at("dist_n").get<std::vector<std::size_t>>();
  auto add_generation_metrics = [&](MetricReport& r) {
    auto it = gens.find(r.method == "apd_fly" ? "apd" : r.method);
    if (it == gens.end()) return;
    std::vector<TokenSeq> flat;
    for (const auto& p : it->second) flat.insert(flat.end(), p.begin(), p.end());
    for (auto n : ns)
      if (auto d = dist_n(it->second, n)) r.dist_n[n] = *d;
    r.rep = rep_ratio(flat);
  };
  auto save = [&](const MetricReport& r, const std::string& stem) {
    auto j = open_out(dir / (stem + ".json"));
    j << r.to_json().dump(2) << "\n";
    auto csv = open_out(dir / (stem + ".csv"));
    r.write_csv(csv);
  };

  json summary = json::object();
  for (const auto& method : methods) {
    std::vector<std::pair<double, MetricReport>> sweep;
    if (method == "elm") {
      sweep.emplace_back(0.0, evaluate_qa("elm", 1.0, elm_scorer(), prepared, mode));
    } else {
      for (double inv_t : inverse_temperature_grid(method == "apd_fly")) {
        const double t = 1.0 / inv_t;
        const StepScorer s = method == "cd"    ? cd_scorer(t)
                             : method == "apd" ? apd_scorer(t)
                                               : on_the_fly_scorer(inv_t);
        sweep.emplace_back(inv_t, evaluate_qa(method, t, s, prepared, mode));
      }
    }
    json runs = json::array();
    std::size_t best = 0;
    for (std::size_t i = 0; i < sweep.size(); ++i) {
      auto& [inv_t, r] = sweep[i];
      add_generation_metrics(r);
      const std::string stem = method == "elm" ? "elm" : method + "_invT" + grid_label(inv_t);
      save(r, stem);
      runs.push_back({{"inv_temperature", inv_t}, {"report", stem + ".json"}, {"perplexity", r.to_json()["perplexity"]}});
      const auto& b = sweep[best].second;
      if (r.perplexity && (!b.perplexity || *r.perplexity < *b.perplexity)) best = i;
    }
    summary[method] = {{"best_inv_temperature", sweep[best].first},
                       {"best", sweep[best].second.to_json()},
                       {"grid", runs}};
    if (c.plot_data && method != "elm") {
      auto tsv = open_out(dir / (method + "_ppl_vs_invT.tsv"));
      tsv << "inv_temperature\tperplexity\taccuracy\tmrr\n";
      for (const auto& [inv_t, r] : sweep)
        tsv << inv_t << '\t' << r.perplexity.value_or(NAN) << '\t' << r.accuracy.value_or(NAN) << '\t'
            << r.mrr.value_or(NAN) << '\n';
    }
    const auto& b = sweep[best].second;
    std::cout << std::left << std::setw(8) << method << " best 1/T=" << std::setw(5) << sweep[best].first
              << " ppl=" << b.perplexity.value_or(NAN) << " acc=" << b.accuracy.value_or(NAN)
              << " mrr=" << b.mrr.value_or(NAN) << " (items " << b.n_ppl_items << "/" << b.n_items << ")\n";
  }
  auto sj = open_out(dir / "summary.json");
  sj << summary.dump(2) << "\n";
  write_snapshot(cfg, dir / "config.resolved.json");
  return kExitOk;
}

int cmd_theorem_check(const Common& c) {
  const auto cfg = resolve(c);
  const auto n = cfg_get<std::size_t>(cfg, "theorem.configs");
  const auto temps = cfg.at("theorem").at("temperatures").get<std::vector<double>>();
  Rng rng(derive_seed(cfg_get<std::uint64_t>(cfg, "seed"), 0x7e0));
  double worst = 0.0;
  json per_t = json::object();
  for (double t : temps) {
    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double ls_alm = uniform(rng, std::log(1e6), std::log(1e9));
      const double ls_elm = ls_alm + uniform(rng, 0.0, 5.0);
      std::vector<LogitLine> lines(1 + uniform_index(rng, 50));
      for (auto& l : lines) l = {uniform(rng, -1.0, 1.0), uniform(rng, -10.0, 10.0)};
      w = std::max(w, verify_theorem(lines, ls_elm, ls_alm, t));
    }
    per_t[double_repr(t)] = w;
    worst = std::max(worst, w);
  }
  std::cout << json{{"configs", n}, {"max_discrepancy", worst}, {"per_temperature", per_t}}.dump(2) << "\n";
  return kExitOk;
}

int cmd_probe_blindness(const Common& c) {
  const auto cfg = resolve(c);
  const auto sc = default_blindness_scenario();
  const auto r = obvious_blindness_probe(sc, cfg_get<double>(cfg, "decode.temperature"), fit_options(cfg));
  std::cout << json{{"tokens", sc.tokens},
                    {"elm_argmax", sc.tokens[r.elm_argmax]},
                    {"cd_argmax", sc.tokens[r.cd_argmax]},
                    {"apd_argmax", sc.tokens[r.apd_argmax]},
                    {"cd_probs", r.cd_probs},
                    {"apd_probs", r.apd_probs},
                    {"asymptotes", r.asymptotes}}
                   .dump(2)
            << "\n";
  return kExitOk;
}

/// Writes a corpus, a trace corpus and a QA file drawn from the synthetic
/// language into paths.output (a directory).
int cmd_make_synthetic(const Common& c) {
  const auto cfg = resolve(c);
  const auto dir = cfg_path(cfg, "output", false);
  if (fs::exists(dir) && !fs::is_empty(dir) && !c.force)
    throw ConfigError(dir.string() + " is not empty (use --force to overwrite)");
  fs::create_directories(dir);
  SyntheticConfig sc;
  sc.words = cfg_get<std::size_t>(cfg, "synthetic.words");
  sc.rank = cfg_get<std::size_t>(cfg, "synthetic.rank");
  sc.unigram_scale = cfg_get<double>(cfg, "synthetic.unigram_scale");
  sc.prev1_scale = cfg_get<double>(cfg, "synthetic.prev1_scale");
  sc.prev2_scale = cfg_get<double>(cfg, "synthetic.prev2_scale");
  sc.line_length = cfg_get<std::size_t>(cfg, "synthetic.line_length");
  const auto seed = cfg_get<std::uint64_t>(cfg, "seed");
  sc.seed = seed;
  const SyntheticLanguage lang(sc);
  const auto train = lang.sample_corpus(cfg_get<std::size_t>(cfg, "synthetic.lines"), derive_seed(seed, 1));
  const auto trace = lang.sample_corpus(cfg_get<std::size_t>(cfg, "synthetic.trace_lines"), derive_seed(seed, 2));
  // every word appears in the vocabulary even if the sample missed it
  std::vector<std::string> all_words;
  for (std::size_t i = 0; i < sc.words; ++i) all_words.push_back(SyntheticLanguage::word(i));
  const Vocabulary vocab(TokenMode::Whitespace, all_words);
  auto write = [&](const std::string& name, const std::vector<std::string>& lines) {
    auto out = open_out(dir / name);
    for (const auto& l : lines) out << l << "\n";
  };
  write("corpus.txt", train);
  write("trace_corpus.txt", trace);
  auto qa = open_out(dir / "qa.jsonl");
  for (const auto& q : make_synthetic_qa(lang, vocab, cfg_get<std::size_t>(cfg, "synthetic.qa_items"),
                                         cfg_get<std::size_t>(cfg, "synthetic.distractors"), derive_seed(seed, 3))) {
    json opts = json::array();
    for (const auto& o : q.options) opts.push_back(vocab.detokenize(o));
    qa << json{{"id", q.id}, {"prompt", vocab.detokenize(q.prompt)}, {"options", opts}, {"correct", q.correct}}.dump()
       << "\n";
  }
  write_snapshot(cfg, dir / "config.resolved.json");
  std::cout << "wrote " << train.size() << " corpus lines, " << trace.size() << " trace lines to " << dir.string()
            << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive and asymptotic-probability decoding toolkit"};
  app.require_subcommand(1);
  Common common;
  std::map<std::string, int (*)(const Common&)> handlers = {
      {"train-family", cmd_train_family},     {"collect-traces", cmd_collect_traces},
      {"train-apd", cmd_train_apd},           {"fit-curves", cmd_fit_curves},
      {"decode", cmd_decode},                 {"evaluate", cmd_evaluate},
      {"theorem-check", cmd_theorem_check},   {"probe-blindness", cmd_probe_blindness},
      {"make-synthetic", cmd_make_synthetic}};
  const std::map<std::string, std::string> help = {
      {"train-family", "train the size-ordered model family on a corpus"},
      {"collect-traces", "record every member's probabilities over candidate sets"},
      {"train-apd", "fine-tune the amateur so the CD formula yields asymptotic probabilities"},
      {"fit-curves", "fit decay curves to trace records and dump the parameters"},
      {"decode", "sample continuations for prompts from elm/cd/apd"},
      {"evaluate", "QA perplexity/accuracy/MRR over the 1/T grid, plus generation metrics"},
      {"theorem-check", "check the hypothetical-model identity on random linear logits"},
      {"probe-blindness", "run the two-token obvious-blindness scenario"},
      {"make-synthetic", "write a synthetic corpus and QA set with a known distribution"}};
  std::vector<CLI::App*> subs;
  for (const auto& [name, _] : handlers) {
    auto* sub = app.add_subcommand(name, help.at(name));
    sub->add_option("-c,--config", common.config_file, "JSON config file");
    sub->add_flag("--force", common.force, "overwrite existing outputs");
    sub->add_flag("--plot-data", common.plot_data, "also write x/y series for plotting");
    sub->add_option("--threads", common.threads, "cap on worker threads");
    sub->allow_extras();
    subs.push_back(sub);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  try {
    for (auto* sub : subs) {
      if (!sub->parsed()) continue;
      for (const auto& extra : sub->remaining()) {
        if (extra.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + extra + "'");
        common.overrides.push_back(extra.substr(2));
      }
      return handlers.at(sub->get_name())(common);
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitConfig;
}
