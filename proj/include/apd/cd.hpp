#pragma once

// Contrastive decoding, the asymptotic-probability output distribution, and
// the size of the hypothetical model that CD implicitly extrapolates to.

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "apd/common.hpp"

namespace apd {

struct DecodeConfig {
  double temperature = 1.0;  // T, applied to the amateur
  double alpha = 0.1;        // alpha-mask fraction
  std::optional<std::vector<std::size_t>> restrict_to;

  void validate() const {
    require(temperature > 0.0, "temperature T must be > 0");
    require(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
  }
};

/// l_elm - l_alm / T.
inline double cd_logit(double l_elm, double l_alm, double temperature) {
  require(temperature > 0.0, "temperature T must be > 0");
  return l_elm - l_alm / temperature;
}

/// Softmax over CD logits; when `restrict_to` is set only those indices get
/// mass and the distribution is renormalised over them.
template <typename T>
std::vector<double> cd_distribution(std::span<const T> elm_logits, std::span<const T> alm_logits,
                                    const DecodeConfig& cfg) {
  cfg.validate();
  require(elm_logits.size() == alm_logits.size(), "ELM and ALM logit vectors differ in length");
  require(!elm_logits.empty(), "empty logit vectors");
  std::vector<double> z(elm_logits.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    z[i] = cd_logit(static_cast<double>(elm_logits[i]), static_cast<double>(alm_logits[i]), cfg.temperature);
  if (!cfg.restrict_to) return softmax(z);
  std::vector<double> sub;
  for (auto i : *cfg.restrict_to) {
    require(i < z.size(), "restricted candidate index out of range");
    sub.push_back(z[i]);
  }
  require(!sub.empty(), "restricted candidate set is empty");
  const auto p = softmax(sub);
  std::vector<double> out(z.size(), 0.0);
  for (std::size_t j = 0; j < p.size(); ++j) out[(*cfg.restrict_to)[j]] += p[j];
  return out;
}

template <typename T>
std::vector<double> cd_distribution(const std::vector<T>& elm, const std::vector<T>& alm, const DecodeConfig& cfg) {
  return cd_distribution(std::span<const T>(elm), std::span<const T>(alm), cfg);
}

/// The APD output uses the CD formula with the fine-tuned amateur.
template <typename T>
std::vector<double> apd_distribution(std::span<const T> elm_logits, std::span<const T> alm_prime_logits,
                                     const DecodeConfig& cfg) {
  return cd_distribution(elm_logits, alm_prime_logits, cfg);
}

template <typename T>
std::vector<double> apd_distribution(const std::vector<T>& elm, const std::vector<T>& alm_prime,
                                     const DecodeConfig& cfg) {
  return cd_distribution(std::span<const T>(elm), std::span<const T>(alm_prime), cfg);
}

struct HlmResult {
  double hlm_log_size = 0.0;
  double logit_scale = 0.0;  // 1 - 1/T
  double size_gap = 0.0;     // log s_elm - log s_alm
  std::vector<double> logit_gap;  // per token: L_alm - L_elm (filled by hlm_analysis)
};

/// Size of the hypothetical model whose logits, scaled by (1 - 1/T), equal the
/// CD logits when logits are linear in log size:
///   log s_hlm = (T log s_elm - log s_alm) / (T - 1).
inline HlmResult hlm_size(double log_s_elm, double log_s_alm, double temperature) {
  require(temperature > 1.0, "hlm_size requires T > 1");
  require(log_s_elm >= log_s_alm, "expert must not be smaller than the amateur");
  HlmResult r;
  r.hlm_log_size = (temperature * log_s_elm - log_s_alm) / (temperature - 1.0);
  r.logit_scale = 1.0 - 1.0 / temperature;
  r.size_gap = log_s_elm - log_s_alm;
  return r;
}

/// hlm_size plus the per-token logit gap L_alm - L_elm.
template <typename T>
HlmResult hlm_analysis(double log_s_elm, double log_s_alm, double temperature, std::span<const T> elm_logits,
                       std::span<const T> alm_logits) {
  require(elm_logits.size() == alm_logits.size(), "ELM and ALM logit vectors differ in length");
  auto r = hlm_size(log_s_elm, log_s_alm, temperature);
  for (std::size_t i = 0; i < elm_logits.size(); ++i)
    r.logit_gap.push_back(static_cast<double>(alm_logits[i]) - static_cast<double>(elm_logits[i]));
  return r;
}

/// A token whose logit is an exact linear function of log model size.
struct LogitLine {
  double slope = 0.0;
  double intercept = 0.0;
  double at(double log_size) const { return intercept + slope * log_size; }
};

/// Max over tokens of |cd_logit - (1 - 1/T) * line(log s_hlm)| for logits that
/// are linear in log size. Zero up to rounding whenever the linearity holds.
inline double verify_theorem(std::span<const LogitLine> lines, double log_s_elm, double log_s_alm,
                             double temperature) {
  const auto h = hlm_size(log_s_elm, log_s_alm, temperature);
  double worst = 0.0;
  for (const auto& line : lines) {
    const double cd = cd_logit(line.at(log_s_elm), line.at(log_s_alm), temperature);
    const double hlm = h.logit_scale * line.at(h.hlm_log_size);
    worst = std::max(worst, std::abs(cd - hlm));
  }
  return worst;
}

/// {w : p(w) >= alpha * max p}. Always contains the argmax.
inline std::vector<std::size_t> alpha_mask(std::span<const double> probs, double alpha) {
  require(!probs.empty(), "alpha_mask of an empty distribution");
  require(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
  double mx = 0.0;
  for (double p : probs) mx = std::max(mx, p);
  const double threshold = alpha * mx;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < probs.size(); ++i)
    if (probs[i] >= threshold && probs[i] > 0.0) keep.push_back(i);
  return keep;
}

}  // namespace apd
