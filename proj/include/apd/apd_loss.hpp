#pragma once

// Losses that train the fine-tuned amateur and the energy network jointly.
//   L1 = sqrt( sum_{c,w,i<N} (p'_i - curve(s_i))^2 / (Z (N-1)) )
//   L2 = sqrt( sum_{c,w} max(0, curve(s_N) - p'_N) / Z )
//   L3 = sqrt( sum_{c,w} (L_alm'(w) - L_alm(w))^2 / Z )
//   total = L1 + lambda2 L2 + lambda3 L3,   Z = sum over the batch of |A_c|.

#include <cmath>
#include <span>
#include <vector>

#include "apd/curves.hpp"
#include "apd/energy_mlp.hpp"
#include "apd/traces.hpp"

namespace apd {

struct LossBreakdown {
  double l1 = 0.0;
  double l2 = 0.0;
  double l3 = 0.0;
  double total = 0.0;
  double z = 0.0;
};

/// Root mean square of residuals over Z * (N-1) terms.
inline double loss_l1(std::span<const double> predicted, std::span<const double> observed, double z,
                      std::size_t n_minus_1) {
  require(predicted.size() == observed.size(), "L1 inputs differ in length");
  require(z > 0.0 && n_minus_1 > 0, "L1 normaliser must be positive");
  double acc = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) acc += (predicted[i] - observed[i]) * (predicted[i] - observed[i]);
  return std::sqrt(acc / (z * static_cast<double>(n_minus_1)));
}

/// sqrt of the mean hinge overshoot of the curve at the largest model.
inline double loss_l2(std::span<const double> curve_at_largest, std::span<const double> observed_largest, double z) {
  require(curve_at_largest.size() == observed_largest.size(), "L2 inputs differ in length");
  require(z > 0.0, "L2 normaliser must be positive");
  double acc = 0.0;
  for (std::size_t i = 0; i < curve_at_largest.size(); ++i)
    acc += std::max(0.0, curve_at_largest[i] - observed_largest[i]);
  return std::sqrt(acc / z);
}

/// Root mean square change of the amateur's candidate logits.
inline double loss_l3(std::span<const double> alm_prime_logits, std::span<const double> alm_logits, double z) {
  require(alm_prime_logits.size() == alm_logits.size(), "L3 inputs differ in length");
  require(z > 0.0, "L3 normaliser must be positive");
  double acc = 0.0;
  for (std::size_t i = 0; i < alm_logits.size(); ++i)
    acc += (alm_prime_logits[i] - alm_logits[i]) * (alm_prime_logits[i] - alm_logits[i]);
  return std::sqrt(acc / z);
}

inline LossBreakdown total_loss(double l1, double l2, double l3, double lambda2, double lambda3, double z = 0.0) {
  require(lambda2 >= 0.0 && lambda3 >= 0.0, "loss weights must be non-negative");
  return {l1, l2, l3, l1 + lambda2 * l2 + lambda3 * l3, z};
}

/// (a, b, d) from the energy network for one token; dropout only when a seed is given.
inline std::array<double, 3> mlp_forward(const EnergyMLP& mlp, double ap, std::span<const double> probs,
                                         std::optional<std::uint64_t> dropout_seed = std::nullopt) {
  require(probs.size() == mlp.n_models(), "energy network expects one probability per model");
  MatD x(1, static_cast<Eigen::Index>(mlp.input_dim()));
  x(0, 0) = ap;
  for (std::size_t i = 0; i < probs.size(); ++i) x(0, static_cast<Eigen::Index>(i + 1)) = probs[i];
  std::optional<Rng> rng;
  if (dropout_seed) rng.emplace(*dropout_seed);
  const auto f = mlp.forward(x, rng ? &*rng : nullptr);
  return {f.params(0, 0), f.params(0, 1), f.params(0, 2)};
}

// ---- curve part -------------------------------------------------------------

/// Gradients of L1 + lambda2 L2 with respect to each token's AP' and (a, b, d).
struct CurveGrad {
  VecD d_ap;   // M
  MatD d_abd;  // M x 3
};

/// L1 and L2 of M exponential curves (AP'_m, a_m, b_m, d_m) against flipped
/// observations y (M x N) at (shifted) log sizes s. Z = M.
inline std::pair<double, double> curve_batch_loss(const VecD& ap, const MatD& abd, const MatD& y,
                                                  std::span<const double> s, double lambda2, CurveGrad* grad) {
  const auto M = y.rows();
  const auto N = y.cols();
  require(N >= 2 && static_cast<std::size_t>(N) == s.size() && ap.size() == M && abd.rows() == M && abd.cols() == 3,
          "curve batch shapes disagree");
  const double z = static_cast<double>(M);
  double sq = 0.0, hinge = 0.0;
  if (grad) {
    grad->d_ap = VecD::Zero(M);
    grad->d_abd = MatD::Zero(M, 3);
  }
  std::vector<double> r_store(static_cast<std::size_t>(M * N));
  std::vector<std::array<double, 3>> p_store(static_cast<std::size_t>(M * N));
  for (Eigen::Index m = 0; m < M; ++m) {
    const double a = abd(m, 0), b = abd(m, 1), d = abd(m, 2);
    for (Eigen::Index i = 0; i < N; ++i) {
      const double u = b * (s[static_cast<std::size_t>(i)] - d);
      const double gi = u > 0.0 ? std::exp(-u) : 1.0;
      const double ci = ap[m] + a * gi;
      const double r = ci - y(m, i);
      r_store[static_cast<std::size_t>(m * N + i)] = r;
      p_store[static_cast<std::size_t>(m * N + i)] = {
          gi, u > 0.0 ? -a * (s[static_cast<std::size_t>(i)] - d) * gi : 0.0, u > 0.0 ? a * b * gi : 0.0};
      if (i + 1 < N) sq += r * r;
      else hinge += std::max(0.0, r);
    }
  }
  const double mse = sq / (z * static_cast<double>(N - 1));
  const double mh = hinge / z;
  const double l1 = GuardedSqrt::value(mse);
  const double l2 = GuardedSqrt::value(mh);
  if (grad) {
    const double k1 = GuardedSqrt::deriv(mse) / (z * static_cast<double>(N - 1));
    const double k2 = lambda2 * GuardedSqrt::deriv(mh) / z;
    for (Eigen::Index m = 0; m < M; ++m)
      for (Eigen::Index i = 0; i < N; ++i) {
        const double r = r_store[static_cast<std::size_t>(m * N + i)];
        double w;
        if (i + 1 < N) w = k1 * 2.0 * r;
        else w = r > 0.0 ? k2 : 0.0;
        if (w == 0.0) continue;
        const auto& p = p_store[static_cast<std::size_t>(m * N + i)];
        grad->d_ap[m] += w;
        for (int k = 0; k < 3; ++k) grad->d_abd(m, k) += w * p[static_cast<std::size_t>(k)];
      }
  }
  return {l1, l2};
}

// ---- full batch loss ----------------------------------------------------------

/// Softmax of (L_elm - L_alm') over the candidates: the predicted asymptote at T = 1.
inline std::vector<double> predict_ap(std::span<const double> elm_logits, std::span<const double> alm_prime_logits) {
  require(!elm_logits.empty(), "empty candidate set");
  require(elm_logits.size() == alm_prime_logits.size(), "candidate logit vectors differ in length");
  std::vector<double> diff(elm_logits.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = elm_logits[i] - alm_prime_logits[i];
  auto p = softmax(diff);
  double z = 0.0;
  for (double v : p) z += v;
  for (auto& v : p) v /= z;
  return p;
}

struct ApdGrad {
  EnergyMLP mlp;                      // same shape as the network
  std::vector<std::vector<double>> dq;  // per record, per candidate
};

/// Everything the loss needs about one record besides the live ALM' logits.
struct ApdExample {
  const TraceRecord* record = nullptr;
  std::vector<double> l_elm;
  std::vector<double> l_alm;
  std::vector<bool> flipped;  // per candidate, from the trace observations only
  MatD y;                     // flipped observations, |A_c| x N
};

inline ApdExample make_example(const TraceRecord& rec) {
  ApdExample ex;
  ex.record = &rec;
  const auto n = rec.n_cands();
  const auto N = rec.n_models();
  ex.y.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(N));
  for (std::size_t j = 0; j < n; ++j) {
    ex.l_elm.push_back(rec.l_elm[j]);
    ex.l_alm.push_back(rec.l_alm[j]);
    const bool f = rec.probs.front()[j] < rec.probs.back()[j];
    ex.flipped.push_back(f);
    for (std::size_t i = 0; i < N; ++i) {
      const double p = rec.probs[i][j];
      ex.y(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = f ? 1.0 - p : p;
    }
  }
  return ex;
}

/// Network input, flipped asymptotes and observations of a batch for fixed
/// ALM' logits.
struct BatchInputs {
  std::vector<std::vector<double>> ap;  // per record, unflipped
  VecD ap_flipped;
  MatD x, y;
  double l3_acc = 0.0;  // summed squared logit change
  double z = 0.0;       // candidate count
};

inline BatchInputs batch_inputs(std::span<const ApdExample> batch, const std::vector<std::vector<double>>& q,
                                std::size_t N) {
  std::size_t M = 0;
  for (const auto& ex : batch) M += ex.l_elm.size();
  BatchInputs in;
  in.z = static_cast<double>(M);
  in.ap.resize(batch.size());
  in.ap_flipped.resize(static_cast<Eigen::Index>(M));
  in.x.resize(static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(N + 1));
  in.y.resize(static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(N));
  for (std::size_t r = 0, row = 0; r < batch.size(); ++r) {
    const auto& ex = batch[r];
    require(q[r].size() == ex.l_elm.size(), "ALM' logits do not cover the candidate set");
    in.ap[r] = predict_ap(ex.l_elm, q[r]);
    for (std::size_t j = 0; j < ex.l_elm.size(); ++j, ++row) {
      const auto ri = static_cast<Eigen::Index>(row);
      in.ap_flipped[ri] = ex.flipped[j] ? 1.0 - in.ap[r][j] : in.ap[r][j];
      in.x(ri, 0) = in.ap_flipped[ri];
      for (std::size_t i = 0; i < N; ++i) {
        in.y(ri, static_cast<Eigen::Index>(i)) = ex.y(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
        in.x(ri, static_cast<Eigen::Index>(i + 1)) = in.y(ri, static_cast<Eigen::Index>(i));
      }
      const double delta = q[r][j] - ex.l_alm[j];
      in.l3_acc += delta * delta;
    }
  }
  return in;
}

/// Forward and (optionally) backward of the joint loss over a batch.
/// `q[r]` holds the live ALM' logits over record r's candidates.
inline LossBreakdown apd_batch_loss(const EnergyMLP& mlp, std::span<const ApdExample> batch,
                                    const std::vector<std::vector<double>>& q, std::span<const double> log_sizes,
                                    double lambda2, double lambda3, Rng* dropout_rng, ApdGrad* grad) {
  require(!batch.empty() && q.size() == batch.size(), "batch and logit lists differ");
  const std::size_t N = mlp.n_models();
  require(log_sizes.size() == N, "log sizes do not match the energy network");
  auto [ap, ap_flipped, x, y, l3_acc, z] = batch_inputs(batch, q, N);
  const auto f = mlp.forward(x, dropout_rng);
  CurveGrad cg;
  const auto [l1, l2] = curve_batch_loss(ap_flipped, f.params, y, log_sizes, lambda2, grad ? &cg : nullptr);
  const double l3_mean = l3_acc / z;
  const double l3 = GuardedSqrt::value(l3_mean);
  auto out = total_loss(l1, l2, l3, lambda2, lambda3, z);
  if (!grad) return out;

  grad->mlp = EnergyMLP::zeros_like(mlp);
  const MatD dx = mlp.backward(f, cg.d_abd, grad->mlp);
  const double k3 = lambda3 * GuardedSqrt::deriv(l3_mean) * 2.0 / z;
  grad->dq.assign(batch.size(), {});
  for (std::size_t r = 0, row = 0; r < batch.size(); ++r) {
    const auto& ex = batch[r];
    const std::size_t n = ex.l_elm.size();
    std::vector<double> d_ap(n);
    for (std::size_t j = 0; j < n; ++j) {
      const auto ri = static_cast<Eigen::Index>(row + j);
      const double d_flipped = cg.d_ap[ri] + dx(ri, 0);
      d_ap[j] = ex.flipped[j] ? -d_flipped : d_flipped;
    }
    // softmax backward; u = l_elm - q so dq = -du
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += ap[r][j] * d_ap[j];
    auto& dq = grad->dq[r];
    dq.resize(n);
    for (std::size_t j = 0; j < n; ++j) dq[j] = -ap[r][j] * (d_ap[j] - dot) + k3 * (q[r][j] - ex.l_alm[j]);
    row += n;
  }
  return out;
}

}  // namespace apd
