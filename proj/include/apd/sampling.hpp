#pragma once

// Truncation filters and sampling over next-token distributions.
// Probability ties are broken by ascending token id everywhere.

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "apd/cd.hpp"
#include "apd/common.hpp"

namespace apd {

enum class FilterMethod { None, TopP, TopK, TopPK, Alpha };

inline std::string to_string(FilterMethod m) {
  switch (m) {
    case FilterMethod::None: return "none";
    case FilterMethod::TopP: return "top_p";
    case FilterMethod::TopK: return "top_k";
    case FilterMethod::TopPK: return "top_p_k";
    case FilterMethod::Alpha: return "alpha";
  }
  return "?";
}

inline FilterMethod filter_method_from_string(const std::string& s) {
  if (s == "none") return FilterMethod::None;
  if (s == "top_p") return FilterMethod::TopP;
  if (s == "top_k") return FilterMethod::TopK;
  if (s == "top_p_k") return FilterMethod::TopPK;
  if (s == "alpha") return FilterMethod::Alpha;
  throw InvalidArgument("unknown sampler method '" + s + "'");
}

struct SamplerConfig {
  FilterMethod method = FilterMethod::None;
  double p = 0.9;
  std::size_t k = 20;
  double alpha = 0.1;
  double temperature = 1.0;  // output temperature; 0 means greedy
  std::uint64_t seed = 0;

  void validate() const {
    require(p > 0.0 && p <= 1.0, "top-p must be in (0, 1]");
    require(k >= 1, "top-k must be >= 1");
    require(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
    require(temperature >= 0.0, "output temperature must be >= 0");
  }
};

/// A filtered distribution: the kept token ids (by descending probability)
/// and the renormalised full-length vector.
struct Filtered {
  std::vector<std::size_t> kept;
  std::vector<double> probs;
};

namespace detail {

inline void check_distribution(std::span<const double> probs) {
  require(!probs.empty(), "empty distribution");
  for (double p : probs) require(p >= 0.0 && std::isfinite(p), "distribution has negative or non-finite mass");
}

inline Filtered keep_only(std::span<const double> probs, std::vector<std::size_t> kept) {
  Filtered f;
  f.probs.assign(probs.size(), 0.0);
  double z = 0.0;
  for (auto i : kept) z += probs[i];
  require(z > 0.0, "filter removed all probability mass");
  for (auto i : kept) f.probs[i] = probs[i] / z;
  f.kept = std::move(kept);
  return f;
}

}  // namespace detail

/// Smallest probability-sorted prefix whose mass reaches p.
inline Filtered top_p_filter(std::span<const double> probs, double p) {
  detail::check_distribution(probs);
  require(p > 0.0 && p <= 1.0, "top-p must be in (0, 1]");
  const auto order = rank_desc(probs);
  std::vector<std::size_t> kept;
  double total = 0.0;
  for (double v : probs) total += v;
  double acc = 0.0;
  for (auto i : order) {
    if (probs[i] <= 0.0) break;
    kept.push_back(i);
    acc += probs[i];
    // relative slack absorbs rounding in the running sum
    if (acc >= p * total * (1.0 - 1e-12)) break;
  }
  return detail::keep_only(probs, std::move(kept));
}

/// The k most probable tokens.
inline Filtered top_k_filter(std::span<const double> probs, std::size_t k) {
  detail::check_distribution(probs);
  require(k >= 1, "top-k must be >= 1");
  const auto order = rank_desc(probs);
  std::vector<std::size_t> kept(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(k, order.size())));
  while (!kept.empty() && probs[kept.back()] <= 0.0) kept.pop_back();
  return detail::keep_only(probs, std::move(kept));
}

inline Filtered alpha_filter(std::span<const double> probs, double alpha) {
  detail::check_distribution(probs);
  auto kept = alpha_mask(probs, alpha);
  std::stable_sort(kept.begin(), kept.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  return detail::keep_only(probs, std::move(kept));
}

/// p^(1/tau) renormalised; tau = 0 is a point mass on the argmax.
inline std::vector<double> apply_temperature(std::span<const double> probs, double tau) {
  detail::check_distribution(probs);
  std::vector<double> out(probs.size(), 0.0);
  if (tau == 0.0) {
    out[argmax(probs)] = 1.0;
    return out;
  }
  if (tau == 1.0) return {probs.begin(), probs.end()};
  double mx = 0.0;
  for (double p : probs) mx = std::max(mx, p);
  double z = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    out[i] = probs[i] > 0.0 ? std::exp(std::log(probs[i] / mx) / tau) : 0.0;
    z += out[i];
  }
  for (auto& v : out) v /= z;
  return out;
}

/// Output temperature first, then the configured truncation. `alpha_source`
/// lets the alpha mask be computed on the expert's distribution rather than
/// the modified one.
inline std::vector<double> compose_filters(std::span<const double> probs, const SamplerConfig& cfg,
                                           std::span<const double> alpha_source = {}) {
  cfg.validate();
  const auto tempered = apply_temperature(probs, cfg.temperature);
  switch (cfg.method) {
    case FilterMethod::None: return tempered;
    case FilterMethod::TopP: return top_p_filter(tempered, cfg.p).probs;
    case FilterMethod::TopK: return top_k_filter(tempered, cfg.k).probs;
    case FilterMethod::TopPK: {
      const auto k = top_k_filter(tempered, cfg.k);
      return top_p_filter(k.probs, cfg.p).probs;
    }
    case FilterMethod::Alpha: {
      const auto src = alpha_source.empty() ? std::span<const double>(tempered) : alpha_source;
      require(src.size() == tempered.size(), "alpha source length mismatch");
      std::vector<double> masked(tempered.size(), 0.0);
      for (auto i : alpha_mask(src, cfg.alpha)) masked[i] = tempered[i];
      return detail::keep_only(masked, alpha_mask(src, cfg.alpha)).probs;
    }
  }
  return tempered;
}

/// Inverse-CDF draw.
inline TokenId sample_token(std::span<const double> dist, Rng& rng) {
  detail::check_distribution(dist);
  double total = 0.0;
  for (double p : dist) total += p;
  const double u = uniform01(rng) * total;
  double acc = 0.0;
  std::size_t last_nonzero = 0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] <= 0.0) continue;
    acc += dist[i];
    last_nonzero = i;
    if (u < acc) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(last_nonzero);
}

}  // namespace apd
