#pragma once

// Joint fine-tuning of the amateur (ALM') and the energy network so that the
// contrastive formula with ALM' outputs extrapolated asymptotic probabilities.

#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "apd/apd_loss.hpp"
#include "apd/tiny_lm.hpp"

namespace apd {

struct TrainConfig {
  double lambda2 = 10.0;
  double lambda3 = 0.8;
  std::size_t epochs = 5;
  double lr = 1e-4;
  std::size_t batch_size = 64;
  std::size_t warmup = 100;
  double weight_decay = 0.01;
  std::size_t mlp_hidden = 100;
  double dropout = 0.5;
  std::uint64_t seed = 0;

  void validate(std::size_t total_steps) const {
    require(lambda2 >= 0.0 && lambda3 >= 0.0, "lambda2 and lambda3 must be non-negative");
    require(epochs >= 1 && batch_size >= 1, "epochs and batch size must be positive");
    require(lr >= 0.0, "learning rate must be non-negative");
    require(warmup <= total_steps, "warmup (" + std::to_string(warmup) + ") exceeds total steps (" +
                                       std::to_string(total_steps) + ")");
  }
};

struct LossRow {
  std::size_t step = 0;  // 1-based
  LossBreakdown loss;
  double lr = 0.0;
};

struct ApdTrainResult {
  TinyLM alm_prime;
  EnergyMLP mlp;
  std::vector<LossRow> history;
};

inline std::vector<double> shifted_log_sizes(std::span<const double> log_sizes) {
  std::vector<double> s;
  for (double v : log_sizes) s.push_back(v - log_sizes.front());
  return s;
}

inline std::size_t apd_total_steps(std::size_t records, const TrainConfig& cfg) {
  return (records + cfg.batch_size - 1) / cfg.batch_size * cfg.epochs;
}

/// Confirms the stored amateur logits were produced by `alm`.
inline void check_traces_match_alm(const TraceFile& traces, const TinyLM& alm, std::size_t probe = 8) {
  for (std::size_t r = 0; r < std::min(probe, traces.records.size()); ++r) {
    const auto& rec = traces.records[r];
    const auto logits = alm.logits(rec.ctx);
    for (std::size_t j = 0; j < rec.n_cands(); ++j) {
      const float stored = rec.l_alm[j];
      const float live = logits[static_cast<std::size_t>(rec.cands[j])];
      if (std::abs(stored - live) > 1e-3f * std::max(1.0f, std::abs(stored)))
        throw InvalidArgument("traces were not collected with this amateur model (ALM logits differ at record " +
                              std::to_string(rec.ctx_id) + ")");
    }
  }
}

/// Fine-tunes a copy of `alm`. Records are visited in a seeded order per
/// epoch; each batch predicts asymptotes with the live ALM', fits curves with
/// the energy network, and steps both with AdamW under a linear warmup.
inline ApdTrainResult train_alm_prime(const TraceFile& traces, const TinyLM& alm, const TrainConfig& cfg,
                                      const std::string& expected_family_hash = "", std::ostream* log = nullptr) {
  const auto& h = traces.header;
  require(h.n_models >= 3, "APD training needs traces from at least 3 models");
  require(!traces.records.empty(), "no trace records to train on");
  if (!expected_family_hash.empty() && expected_family_hash != h.family_hash)
    throw InvalidArgument("trace family hash " + h.family_hash + " does not match family " + expected_family_hash);
  check_traces_match_alm(traces, alm);
  const std::size_t total_steps = apd_total_steps(traces.records.size(), cfg);
  cfg.validate(total_steps);

  std::vector<ApdExample> examples;
  examples.reserve(traces.records.size());
  for (const auto& r : traces.records) {
    require(r.n_models() == h.n_models, "record model count differs from the header");
    examples.push_back(make_example(r));
  }
  const auto sizes = shifted_log_sizes(h.log_sizes);

  ApdTrainResult res{alm, EnergyMLP(h.n_models, cfg.mlp_hidden, derive_seed(cfg.seed, 0x3e1), cfg.dropout), {}};
  LmTensors lm_grad = LmTensors::zeros(alm.shape());
  auto lm_refs = param_refs(res.alm_prime.params(), lm_grad);
  OptimizerConfig oc;
  oc.weight_decay = cfg.weight_decay;
  Optimizer<float> lm_opt(oc, lm_refs);
  EnergyMLP mlp_grad = EnergyMLP::zeros_like(res.mlp);
  auto mlp_refs = param_refs(res.mlp, mlp_grad);
  Optimizer<double> mlp_opt(oc, mlp_refs);

  std::vector<std::size_t> order(examples.size());
  std::size_t step = 0;
  ApdGrad grad;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng order_rng(derive_seed(cfg.seed, 0x0e, epoch));
    shuffle(order, order_rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      ++step;
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<ApdExample> batch;
      std::vector<TokenSeq> contexts;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(examples[order[i]]);
        contexts.push_back(batch.back().record->ctx);
      }
      const auto cache = res.alm_prime.forward(contexts);
      std::vector<std::vector<double>> q(batch.size());
      for (std::size_t r = 0; r < batch.size(); ++r)
        for (auto t : batch[r].record->cands)
          q[r].push_back(static_cast<double>(cache.logits(static_cast<Eigen::Index>(r), t)));

      Rng dropout_rng(derive_seed(cfg.seed, 0xd0, step));
      const auto loss =
          apd_batch_loss(res.mlp, batch, q, sizes, cfg.lambda2, cfg.lambda3, &dropout_rng, &grad);
      if (!std::isfinite(loss.total))
        throw NumericalError("APD training produced a non-finite loss at batch " + std::to_string(step) +
                             " (epoch " + std::to_string(epoch) + ")");

      MatF dlogits = MatF::Zero(cache.logits.rows(), cache.logits.cols());
      for (std::size_t r = 0; r < batch.size(); ++r)
        for (std::size_t j = 0; j < q[r].size(); ++j)
          dlogits(static_cast<Eigen::Index>(r), batch[r].record->cands[j]) += static_cast<float>(grad.dq[r][j]);
      lm_grad.set_zero();
      res.alm_prime.backward(cache, dlogits, lm_grad);
      auto g_spans = grad.mlp.spans();
      auto m_spans = mlp_grad.spans();
      for (std::size_t k = 0; k < g_spans.size(); ++k) std::copy(g_spans[k].begin(), g_spans[k].end(), m_spans[k].begin());

      const double lr = warmup_lr(cfg.lr, step, cfg.warmup);
      lm_opt.step(lm_refs, lr);
      mlp_opt.step(mlp_refs, lr);
      res.history.push_back({step, loss, lr});
    }
    if (log) {
      double mean = 0.0;
      std::size_t n = 0;
      for (const auto& row : res.history)
        if (row.step > step - (order.size() + cfg.batch_size - 1) / cfg.batch_size) {
          mean += row.loss.total;
          ++n;
        }
      *log << "epoch " << epoch + 1 << "/" << cfg.epochs << " mean loss " << mean / static_cast<double>(n) << "\n";
    }
  }
  return res;
}

inline void write_loss_csv(std::ostream& out, const std::vector<LossRow>& history) {
  out << "step,L1,L2,L3,total,lr\n";
  for (const auto& r : history)
    out << r.step << ',' << double_repr(r.loss.l1) << ',' << double_repr(r.loss.l2) << ',' << double_repr(r.loss.l3)
        << ',' << double_repr(r.loss.total) << ',' << double_repr(r.lr) << '\n';
}

// ---- checkpoints ----------------------------------------------------------------

/// ALM' in the model container followed by the energy network section.
inline void save_checkpoint(const std::filesystem::path& path, const TinyLM& alm_prime, const EnergyMLP& mlp,
                            const std::string& vocab_hash) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot write checkpoint " + path.string());
  alm_prime.save(out, vocab_hash);
  mlp.save(out);
}

struct ApdCheckpoint {
  TinyLM alm_prime;
  EnergyMLP mlp;
};

inline ApdCheckpoint load_checkpoint(const std::filesystem::path& path, const std::string& vocab_hash = "") {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open checkpoint " + path.string());
  auto lm = TinyLM::load(in, vocab_hash, path.string());
  auto mlp = EnergyMLP::load(in, path.string());
  return {std::move(lm), std::move(mlp)};
}

// ---- gradient check ---------------------------------------------------------------

struct GradCheckInstance {
  EnergyMLP mlp;
  std::vector<TraceRecord> records;
  std::vector<std::vector<double>> q;
  std::vector<double> log_sizes;  // shifted, smallest = 0
  double lambda2 = 10.0;
  double lambda3 = 0.8;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
  std::size_t checked = 0;
};

/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-7) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Denominator floor for central differences of a loss of size |f|: rounding
/// alone perturbs the quotient by about eps_machine |f| / eps, so entries below
/// 1e4 times that are compared against the floor instead of themselves.
inline double difference_floor(double loss, double eps) {
  return std::max(1e-7, 1e4 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(loss)) / eps);
}

inline LossBreakdown instance_loss(const GradCheckInstance& inst, ApdGrad* grad) {
  std::vector<ApdExample> ex;
  for (const auto& r : inst.records) ex.push_back(make_example(r));
  return apd_batch_loss(inst.mlp, ex, inst.q, inst.log_sizes, inst.lambda2, inst.lambda3, nullptr, grad);
}

/// Smallest distance of any clamp or hinge argument from its kink.
inline double kink_margin(const GradCheckInstance& inst) {
  std::vector<ApdExample> ex;
  for (const auto& r : inst.records) ex.push_back(make_example(r));
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < ex.size(); ++r) {
    const auto ap = predict_ap(ex[r].l_elm, inst.q[r]);
    for (std::size_t j = 0; j < ap.size(); ++j) {
      const double apf = ex[r].flipped[j] ? 1.0 - ap[j] : ap[j];
      std::vector<double> y;
      for (Eigen::Index i = 0; i < ex[r].y.cols(); ++i) y.push_back(ex[r].y(static_cast<Eigen::Index>(j), i));
      const auto [a, b, d] = mlp_forward(inst.mlp, apf, y);
      for (std::size_t i = 0; i < inst.log_sizes.size(); ++i)
        margin = std::min(margin, std::abs(b * (inst.log_sizes[i] - d)));
      const double last = apf + a * std::exp(-std::max(0.0, b * (inst.log_sizes.back() - d))) - y.back();
      margin = std::min(margin, std::abs(last));
    }
  }
  return margin;
}

/// A random loss instance with non-trivial network weights, drawn until every
/// clamp and hinge argument is at least `margin` away from its kink.
inline GradCheckInstance random_grad_instance(Rng& rng, std::size_t n_models = 4, std::size_t n_records = 2,
                                              std::size_t n_cands = 3, std::size_t hidden = 100,
                                              double margin = 1e-3) {
  while (true) {
    GradCheckInstance inst{EnergyMLP(n_models, hidden, rng()), {}, {}, {}, 10.0, 0.8};
    auto& last = inst.mlp.layers().back();
    for (Eigen::Index i = 0; i < last.w.size(); ++i) last.w.data()[i] = 0.3 * normal01(rng);
    for (Eigen::Index i = 0; i < last.b.size(); ++i) last.b[i] = 0.5 * normal01(rng);
    double s = 0.0;
    for (std::size_t i = 0; i < n_models; ++i) {
      inst.log_sizes.push_back(s);
      s += uniform(rng, 1.0, 2.5);
    }
    for (std::size_t r = 0; r < n_records; ++r) {
      TraceRecord rec;
      rec.ctx_id = r;
      for (std::size_t j = 0; j < n_cands; ++j) {
        rec.cands.push_back(static_cast<TokenId>(j));
        rec.prov.push_back(Provenance::Top);
        rec.l_elm.push_back(static_cast<float>(normal01(rng)));
        rec.l_alm.push_back(static_cast<float>(normal01(rng)));
      }
      for (std::size_t i = 0; i < n_models; ++i) {
        std::vector<double> w(n_cands);
        for (auto& v : w) v = uniform(rng, 0.05, 1.0);
        double z = std::accumulate(w.begin(), w.end(), 0.0);
        std::vector<float> row;
        for (double v : w) row.push_back(static_cast<float>(v / z));
        rec.probs.push_back(row);
      }
      std::vector<double> q;
      for (std::size_t j = 0; j < n_cands; ++j) q.push_back(rec.l_alm[j] + 0.5 * normal01(rng));
      inst.q.push_back(q);
      inst.records.push_back(std::move(rec));
    }
    if (kink_margin(inst) >= margin) return inst;
  }
}

/// Central differences of the total loss with respect to every energy-network
/// parameter and every ALM' candidate logit, compared with the analytic
/// gradient. A network parameter moves one pre-activation column, so its
/// probes reuse the cached forward pass and push that column's change through
/// the remaining layers.
inline GradCheckReport gradient_check(GradCheckInstance inst, double eps = 1e-5) {
  std::vector<ApdExample> ex;
  for (const auto& r : inst.records) ex.push_back(make_example(r));
  auto loss = [&](ApdGrad* g) {
    return apd_batch_loss(inst.mlp, ex, inst.q, inst.log_sizes, inst.lambda2, inst.lambda3, nullptr, g).total;
  };
  ApdGrad g;
  const double floor = difference_floor(loss(&g), eps);
  GradCheckReport rep;
  auto record = [&](double up, double down, double analytic) {
    rep.max_rel_error = std::max(rep.max_rel_error, relative_error(analytic, (up - down) / (2.0 * eps), floor));
    rep.max_abs_grad = std::max(rep.max_abs_grad, std::abs(analytic));
    ++rep.checked;
  };

  const auto in = batch_inputs(ex, inst.q, inst.mlp.n_models());
  const double l3 = GuardedSqrt::value(in.l3_acc / in.z);
  const auto base = inst.mlp.forward(in.x);
  const auto& layers = inst.mlp.layers();
  const std::size_t last = layers.size() - 1;
  auto loss_from_raw = [&](const MatD& raw) {
    const MatD params = raw.array().exp();
    const auto [l1, l2] = curve_batch_loss(in.ap_flipped, params, in.y, inst.log_sizes, inst.lambda2, nullptr);
    return total_loss(l1, l2, l3, inst.lambda2, inst.lambda3, in.z).total;
  };
  // loss after adding `shift` to pre-activation column `col` of layer `l`
  auto shifted = [&](std::size_t l, Eigen::Index col, const VecD& shift) {
    if (l == last) {
      MatD raw = base.raw;
      raw.col(col) += shift;
      return loss_from_raw(raw);
    }
    const VecD dpost =
        (base.pre[l].col(col) + shift).unaryExpr([](double v) { return gelu(v); }) - base.post[l].col(col);
    MatD z = (l + 1 == last ? base.raw : base.pre[l + 1]) + dpost * layers[l + 1].w.col(col).transpose();
    for (std::size_t k = l + 1; k < last; ++k) {
      const MatD h = z.unaryExpr([](double v) { return gelu(v); });
      z = h * layers[k + 1].w.transpose();
      z.rowwise() += layers[k + 1].b.transpose();
    }
    return loss_from_raw(z);
  };
  for (std::size_t l = 0; l <= last; ++l) {
    const MatD& h = l == 0 ? base.input : base.post[l - 1];
    const auto& w = layers[l].w;
    const VecD ones = VecD::Ones(h.rows());
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) {
        const VecD step = eps * h.col(j);
        record(shifted(l, i, step), shifted(l, i, -step), g.mlp.layers()[l].w(i, j));
      }
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      record(shifted(l, i, eps * ones), shifted(l, i, -eps * ones), g.mlp.layers()[l].b[i]);
  }

  for (std::size_t r = 0; r < inst.q.size(); ++r)
    for (std::size_t j = 0; j < inst.q[r].size(); ++j) {
      double& slot = inst.q[r][j];
      const double orig = slot;
      slot = orig + eps;
      const double up = loss(nullptr);
      slot = orig - eps;
      const double down = loss(nullptr);
      slot = orig;
      record(up, down, g.dq[r][j]);
    }
  return rep;
}

/// Central differences of L1 + lambda2 L2 with respect to each curve's
/// (AP', a, b, d).
inline GradCheckReport curve_gradient_check(VecD ap, MatD abd, const MatD& y, std::span<const double> s,
                                            double lambda2, double eps = 1e-5) {
  CurveGrad g;
  const auto [l1_0, l2_0] = curve_batch_loss(ap, abd, y, s, lambda2, &g);
  const double floor = difference_floor(l1_0 + lambda2 * l2_0, eps);
  auto f = [&]() {
    const auto [l1, l2] = curve_batch_loss(ap, abd, y, s, lambda2, nullptr);
    return l1 + lambda2 * l2;
  };
  GradCheckReport rep;
  auto probe = [&](double& slot, double analytic) {
    const double orig = slot;
    slot = orig + eps;
    const double up = f();
    slot = orig - eps;
    const double down = f();
    slot = orig;
    rep.max_rel_error = std::max(rep.max_rel_error, relative_error(analytic, (up - down) / (2.0 * eps), floor));
    rep.max_abs_grad = std::max(rep.max_abs_grad, std::abs(analytic));
    ++rep.checked;
  };
  for (Eigen::Index m = 0; m < ap.size(); ++m) {
    probe(ap[m], g.d_ap[m]);
    for (Eigen::Index k = 0; k < 3; ++k) probe(abd(m, k), g.d_abd(m, k));
  }
  return rep;
}

}  // namespace apd
