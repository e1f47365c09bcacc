#pragma once

// Probability-vs-size decay curves: flip preprocessing, the exponential,
// logistic and fractional-polynomial families, per-token fitting by Adam and
// synthetic traces drawn from known curves.

#include <array>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "apd/common.hpp"
#include "apd/optim.hpp"

namespace apd {

// ---- flip ----------------------------------------------------------------

struct FlipResult {
  bool flipped = false;
  double ap = 0.0;
  std::vector<double> probs;
};

/// Complements the asymptote candidate and every per-model probability when
/// the smallest model is below the largest, so rising curves become decays.
inline FlipResult flip(double ap_candidate, std::span<const double> probs_by_model) {
  require(probs_by_model.size() >= 2, "flip needs at least 2 models");
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  require(in_unit(ap_candidate), "asymptote candidate outside [0,1]");
  for (double p : probs_by_model) require(in_unit(p), "probability outside [0,1]");
  FlipResult r;
  r.flipped = probs_by_model.front() < probs_by_model.back();
  r.ap = r.flipped ? 1.0 - ap_candidate : ap_candidate;
  r.probs.assign(probs_by_model.begin(), probs_by_model.end());
  if (r.flipped)
    for (auto& p : r.probs) p = 1.0 - p;
  return r;
}

/// Inverse of flip given its recorded branch: complementing twice is the
/// identity, so unflip(flip(x)) == x.
inline std::pair<double, std::vector<double>> unflip(const FlipResult& f) {
  std::pair<double, std::vector<double>> out{f.flipped ? 1.0 - f.ap : f.ap, f.probs};
  if (f.flipped)
    for (auto& p : out.second) p = 1.0 - p;
  return out;
}

inline bool is_flipped(std::span<const double> probs_by_model) {
  return probs_by_model.front() < probs_by_model.back();
}

// ---- curve families --------------------------------------------------------

enum class CurveFamily { Exp, Logistic, FracPoly };

inline std::string to_string(CurveFamily f) {
  switch (f) {
    case CurveFamily::Exp: return "exp";
    case CurveFamily::Logistic: return "logistic";
    case CurveFamily::FracPoly: return "fracpoly";
  }
  return "?";
}

inline CurveFamily curve_family_from_string(const std::string& s) {
  if (s == "exp") return CurveFamily::Exp;
  if (s == "logistic") return CurveFamily::Logistic;
  if (s.rfind("fracpoly", 0) == 0) return CurveFamily::FracPoly;
  throw InvalidArgument("unknown curve family '" + s + "'");
}

struct CurveParams {
  CurveFamily family = CurveFamily::Exp;
  double ap = 0.0;
  double a = 0.0;
  double b = 0.0;
  double d = 0.0;
  // Fractional polynomial only: {d_0.5, d_1, ..., d_K}.
  std::vector<double> coeffs;

  CurveParams() = default;
  CurveParams(CurveFamily fam, double ap_, double a_, double b_, double d_, std::vector<double> c = {})
      : family(fam), ap(ap_), a(a_), b(b_), d(d_), coeffs(std::move(c)) {
    require(ap >= 0.0 && ap <= 1.0, "asymptote must be in [0,1]");
    require(a >= 0.0 && b >= 0.0 && d >= 0.0, "curve parameters a, b, d must be non-negative");
    if (family == CurveFamily::FracPoly) require(coeffs.size() >= 2, "fractional polynomial needs d_0.5 and d_1..d_K");
  }

  static CurveParams exp(double ap, double a, double b, double d) { return {CurveFamily::Exp, ap, a, b, d}; }

  std::size_t fracpoly_order() const { return coeffs.empty() ? 0 : coeffs.size() - 1; }
};

/// AP + a * exp(-max(0, b (s - d))).
inline double exp_decay_eval(const CurveParams& p, double s) {
  return p.ap + p.a * std::exp(-std::max(0.0, p.b * (s - p.d)));
}

/// AP + a / (1 + exp(max(0, b (s - d)))).
inline double logistic_eval(const CurveParams& p, double s) {
  return p.ap + p.a / (1.0 + std::exp(std::max(0.0, p.b * (s - p.d))));
}

/// AP + a (d_0.5 / x^0.5 + sum_k d_k / x^k), x = max(1, b (s - d)).
inline double fracpoly_eval(const CurveParams& p, double s) {
  const double x = std::max(1.0, p.b * (s - p.d));
  double acc = p.coeffs.empty() ? 0.0 : p.coeffs[0] / std::sqrt(x);
  for (std::size_t k = 1; k < p.coeffs.size(); ++k) acc += p.coeffs[k] / std::pow(x, static_cast<double>(k));
  return p.ap + p.a * acc;
}

inline double curve_eval(const CurveParams& p, double s) {
  switch (p.family) {
    case CurveFamily::Exp: return exp_decay_eval(p, s);
    case CurveFamily::Logistic: return logistic_eval(p, s);
    case CurveFamily::FracPoly: return fracpoly_eval(p, s);
  }
  return 0.0;
}

// ---- per-token fitting loss -----------------------------------------------

/// Guarded square root: exact value, derivative 1 / (2 sqrt(x + 1e-12)).
struct GuardedSqrt {
  static constexpr double kGuard = 1e-12;
  static double value(double x) { return std::sqrt(std::max(0.0, x)); }
  static double deriv(double x) { return 0.5 / std::sqrt(std::max(0.0, x) + kGuard); }
};

struct CurveLoss {
  double l1 = 0.0;
  double l2 = 0.0;
  double total = 0.0;
  std::array<double, 4> grad{};  // d total / d (ap, a, b, d)
};

/// Single-token loss L1 + lambda2 * L2 of an exponential curve against
/// (already flipped) observations. L1 is the RMS residual over every model
/// except the last; L2 = sqrt(max(0, curve(s_N) - y_N)).
inline CurveLoss exp_curve_loss(const std::array<double, 4>& theta, std::span<const double> obs,
                                std::span<const double> log_sizes, double lambda2) {
  const std::size_t n = obs.size();
  require(n >= 2 && log_sizes.size() == n, "curve loss needs matching observations and sizes");
  const auto [ap, a, b, d] = theta;
  CurveLoss out;
  std::array<double, 4> g_mse{};
  double mse = 0.0;
  std::array<double, 4> dc_last{};
  double r_last = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = b * (log_sizes[i] - d);
    const double g = u > 0.0 ? std::exp(-u) : 1.0;
    const double c = ap + a * g;
    const std::array<double, 4> dc{1.0, g, u > 0.0 ? -a * (log_sizes[i] - d) * g : 0.0, u > 0.0 ? a * b * g : 0.0};
    const double r = c - obs[i];
    if (i + 1 < n) {
      mse += r * r;
      for (int k = 0; k < 4; ++k) g_mse[k] += 2.0 * r * dc[k];
    } else {
      r_last = r;
      dc_last = dc;
    }
  }
  const double denom = static_cast<double>(n - 1);
  mse /= denom;
  out.l1 = GuardedSqrt::value(mse);
  const double hinge = std::max(0.0, r_last);
  out.l2 = GuardedSqrt::value(hinge);
  out.total = out.l1 + lambda2 * out.l2;
  const double dl1 = GuardedSqrt::deriv(mse) / denom;
  const double dl2 = hinge > 0.0 ? lambda2 * GuardedSqrt::deriv(hinge) : 0.0;
  for (int k = 0; k < 4; ++k) out.grad[k] = dl1 * g_mse[k] + dl2 * dc_last[k];
  return out;
}

struct FitOptions {
  std::size_t iterations = 400;
  double lr = 1e-2;
  double lambda2 = 10.0;
  // Linear decay of the rate from `lr` to zero over the iterations.
  bool decay_lr = true;
  // The hinge term's sqrt has unbounded slope at its kink, where noiseless
  // optima sit; a short second-moment memory keeps those spikes from
  // freezing the other coordinates.
  double beta1 = 0.8;
  double beta2 = 0.9;
  std::size_t max_restarts = 40;
};

struct CurveFit {
  CurveParams params;  // asymptote reported in the original (unflipped) space
  double flipped_ap = 0.0;
  bool flipped = false;
  double final_loss = 0.0;
  double lr_used = 0.0;
  std::size_t restarts = 0;
};

/// Fits AP, a, b, d of an exponential decay to one token's per-model
/// probabilities. Sizes are shifted so the smallest model sits at 0; on the
/// observed range this loses nothing, since a knee before the first model is
/// absorbed by `a`. Negative parameters are clamped to 0 after every step;
/// a run that produces NaN is redone with half the learning rate.
inline CurveFit fit_curve(std::span<const double> probs_by_model, std::span<const double> log_sizes,
                          const FitOptions& opt = {}) {
  const std::size_t n = probs_by_model.size();
  require(n >= 3, "curve fitting needs at least 3 models");
  require(log_sizes.size() == n, "log_sizes length does not match the number of models");
  for (double p : probs_by_model) {
    if (!std::isfinite(p)) throw InvalidArgument("non-finite probability in trace");
  }
  const auto fr = flip(std::clamp(probs_by_model.back(), 0.0, 1.0), probs_by_model);
  const auto& y = fr.probs;
  std::vector<double> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = log_sizes[i] - log_sizes[0];

  std::array<double, 4> init{};
  init[0] = std::max(0.0, y[n - 1] - 0.2 * (y[0] - y[n - 1]));
  init[1] = std::max(y[0] - init[0], 1e-3);
  init[2] = 1.0;
  init[3] = 0.0;

  double lr = opt.lr;
  for (std::size_t attempt = 0; attempt <= opt.max_restarts; ++attempt, lr *= 0.5) {
    std::array<double, 4> theta = init;
    std::array<double, 4> grad{};
    std::vector<ParamRef<double>> refs{{std::span<double>(theta), std::span<double>(grad)}};
    OptimizerConfig adam_cfg;
    adam_cfg.beta1 = opt.beta1;
    adam_cfg.beta2 = opt.beta2;
    Optimizer<double> adam(adam_cfg, refs);
    bool ok = true;
    for (std::size_t it = 0; it < opt.iterations; ++it) {
      grad = exp_curve_loss(theta, y, s, opt.lambda2).grad;
      const double rate =
          opt.decay_lr ? lr * (1.0 - static_cast<double>(it) / static_cast<double>(opt.iterations)) : lr;
      adam.step(refs, rate);
      for (auto& v : theta) v = std::max(0.0, v);
      if (!std::all_of(theta.begin(), theta.end(), [](double v) { return std::isfinite(v); })) {
        ok = false;
        break;
      }
    }
    const auto final = exp_curve_loss(theta, y, s, opt.lambda2);
    if (!ok || !std::isfinite(final.total)) continue;
    CurveFit fit;
    fit.flipped = fr.flipped;
    fit.flipped_ap = std::min(theta[0], 1.0);
    const double ap = std::clamp(fr.flipped ? 1.0 - theta[0] : theta[0], 0.0, 1.0);
    fit.params = CurveParams(CurveFamily::Exp, ap, theta[1], theta[2], theta[3] + log_sizes[0]);
    fit.final_loss = final.total;
    fit.lr_used = lr;
    fit.restarts = attempt;
    return fit;
  }
  throw NumericalError("curve fit kept producing NaN after " + std::to_string(opt.max_restarts) + " restarts");
}

// ---- synthetic traces --------------------------------------------------------

struct SyntheticTrace {
  CurveParams truth;  // decaying-space curve
  bool flipped = false;
  std::vector<double> log_sizes;
  std::vector<double> observed;

  /// Ground-truth asymptote in observation space.
  double true_ap() const { return flipped ? 1.0 - truth.ap : truth.ap; }
};

/// Observations of a known curve at the given sizes, complemented when
/// `flipped`, plus N(0, sigma^2) noise clamped to [0,1]. With sigma = 0 the
/// observations are exact curve evaluations.
inline SyntheticTrace synthesize_trace(const CurveParams& params, std::span<const double> log_sizes, double sigma,
                                       std::uint64_t seed, bool flipped = false) {
  require(sigma >= 0.0, "noise sigma must be non-negative");
  SyntheticTrace t;
  t.truth = params;
  t.flipped = flipped;
  t.log_sizes.assign(log_sizes.begin(), log_sizes.end());
  Rng rng(seed);
  for (double s : log_sizes) {
    double v = curve_eval(params, s);
    if (flipped) v = 1.0 - v;
    if (sigma > 0.0) v = std::clamp(v + sigma * normal01(rng), 0.0, 1.0);
    t.observed.push_back(v);
  }
  return t;
}

/// `n` sizes evenly spaced in log scale between two parameter counts.
inline std::vector<double> log_spaced_sizes(double smallest, double largest, std::size_t n) {
  require(n >= 2 && smallest > 0.0 && largest > smallest, "invalid size range");
  std::vector<double> out;
  const double lo = std::log(smallest), hi = std::log(largest);
  for (std::size_t i = 0; i < n; ++i) out.push_back(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1));
  return out;
}

/// Random exponential decay whose knee is near the smallest model and which
/// decays visibly across the observed size range; flipped half the time.
inline SyntheticTrace random_exp_trace(std::span<const double> log_sizes, double sigma, Rng& rng) {
  const double span = log_sizes.back() - log_sizes.front();
  const double ap = uniform(rng, 0.0, 0.6);
  const double a = uniform(rng, 0.05, std::min(0.4, 1.0 - ap));
  const double b = uniform(rng, 0.5, 2.0) * 4.6 / span;
  const double d = log_sizes.front() + uniform(rng, -1.0, 0.5) * span / 4.6;
  const bool flipped = uniform01(rng) < 0.5;
  return synthesize_trace(CurveParams::exp(ap, a, b, d), log_sizes, sigma, rng(), flipped);
}

}  // namespace apd
