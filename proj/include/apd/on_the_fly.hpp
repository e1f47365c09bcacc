#pragma once

// Inference-time extrapolation baseline: fit a decay curve for every candidate
// of a trace record and mix the normalised asymptotes into the ELM output.

#include <ostream>
#include <vector>

#include "apd/curves.hpp"
#include "apd/traces.hpp"

namespace apd {

struct OnTheFlyResult {
  std::vector<double> distribution;  // over the record's candidates
  std::vector<double> p_ac;          // normalised asymptotes (top candidates only)
  std::vector<CurveFit> fits;
};

/// Per candidate: fit the curve, take the asymptote, normalise the asymptotes
/// of the top-band candidates to p_ac (other candidates get 0) and return
/// (1 - w) * p_elm + w * p_ac with w = 1/T.
inline OnTheFlyResult fit_on_the_fly(const TraceRecord& rec, std::span<const double> log_sizes, double mix_weight,
                                     const FitOptions& opt = {}) {
  require(rec.n_models() >= 3, "on-the-fly fitting needs at least 3 models");
  require(log_sizes.size() == rec.n_models(), "log_sizes length does not match the record");
  require(mix_weight >= 0.0 && mix_weight <= 1.0, "mix weight 1/T must be in [0,1]");
  for (const auto& row : rec.probs)
    for (float v : row)
      if (!std::isfinite(v)) throw InvalidArgument("non-finite value in trace record " + std::to_string(rec.ctx_id));
  OnTheFlyResult out;
  const std::size_t n = rec.n_cands();
  out.p_ac.assign(n, 0.0);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out.fits.push_back(fit_curve(rec.curve(j), log_sizes, opt));
    if (rec.prov[j] == Provenance::Top) {
      out.p_ac[j] = out.fits.back().params.ap;
      z += out.p_ac[j];
    }
  }
  if (z > 0.0) {
    for (auto& v : out.p_ac) v /= z;
  } else {
    // every asymptote collapsed to 0: fall back to the ELM over the top band
    double ze = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (rec.prov[j] == Provenance::Top) ze += rec.probs.back()[j];
    for (std::size_t j = 0; j < n; ++j)
      out.p_ac[j] = rec.prov[j] == Provenance::Top ? rec.probs.back()[j] / ze : 0.0;
  }
  out.distribution.resize(n);
  for (std::size_t j = 0; j < n; ++j)
    out.distribution[j] = (1.0 - mix_weight) * static_cast<double>(rec.probs.back()[j]) + mix_weight * out.p_ac[j];
  return out;
}

/// One JSONL line per fitted candidate curve.
inline void write_curve_dump(std::ostream& out, const TraceRecord& rec, const std::vector<CurveFit>& fits) {
  for (std::size_t j = 0; j < fits.size(); ++j) {
    const auto& f = fits[j];
    out << "{\"ctx_id\":" << rec.ctx_id << ",\"token\":" << rec.cands[j] << ",\"family\":\""
        << to_string(f.params.family) << "\",\"AP\":" << double_repr(f.params.ap)
        << ",\"a\":" << double_repr(f.params.a) << ",\"b\":" << double_repr(f.params.b)
        << ",\"d\":" << double_repr(f.params.d) << ",\"flipped\":" << (f.flipped ? "true" : "false")
        << ",\"final_loss\":" << double_repr(f.final_loss) << "}\n";
  }
}

}  // namespace apd
