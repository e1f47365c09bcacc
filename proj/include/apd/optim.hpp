#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "apd/common.hpp"

namespace apd {

enum class OptimizerKind { AdamW, SgdMomentum };

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adamw" || s == "adam") return OptimizerKind::AdamW;
  if (s == "sgd" || s == "sgd_momentum") return OptimizerKind::SgdMomentum;
  throw InvalidArgument("unknown optimizer '" + s + "'");
}

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::AdamW ? "adamw" : "sgd"; }

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::AdamW;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW); L2-style for SGD
  double momentum = 0.9;
};

/// A parameter tensor viewed as a flat span together with its gradient buffer.
template <typename Scalar>
struct ParamRef {
  std::span<Scalar> value;
  std::span<Scalar> grad;
};

/// Adam with decoupled weight decay, or SGD with momentum, over a fixed list
/// of parameter tensors. The learning rate is supplied per step so callers
/// own the schedule.
template <typename Scalar>
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, const std::vector<ParamRef<Scalar>>& params) : cfg_(cfg) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.size(), Scalar(0));
      if (cfg_.kind == OptimizerKind::AdamW) v_.emplace_back(p.value.size(), Scalar(0));
    }
  }

  void step(const std::vector<ParamRef<Scalar>>& params, double lr) {
    require(params.size() == m_.size(), "optimizer parameter list changed");
    ++t_;
    if (cfg_.kind == OptimizerKind::AdamW) {
      const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
      const auto b1 = static_cast<Scalar>(cfg_.beta1), b2 = static_cast<Scalar>(cfg_.beta2);
      const auto step_size = static_cast<Scalar>(lr / bc1);
      const auto inv_sqrt_bc2 = static_cast<Scalar>(1.0 / std::sqrt(bc2));
      const auto eps = static_cast<Scalar>(cfg_.eps);
      const auto decay = static_cast<Scalar>(1.0 - lr * cfg_.weight_decay);
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto& m = m_[k];
        auto& v = v_[k];
        auto w = params[k].value;
        auto g = params[k].grad;
        for (std::size_t i = 0; i < w.size(); ++i) {
          m[i] = b1 * m[i] + (Scalar(1) - b1) * g[i];
          v[i] = b2 * v[i] + (Scalar(1) - b2) * g[i] * g[i];
          if (cfg_.weight_decay != 0.0) w[i] *= decay;
          w[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
        }
      }
    } else {
      const auto mu = static_cast<Scalar>(cfg_.momentum);
      const auto wd = static_cast<Scalar>(cfg_.weight_decay);
      const auto rate = static_cast<Scalar>(lr);
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto& m = m_[k];
        auto w = params[k].value;
        auto g = params[k].grad;
        for (std::size_t i = 0; i < w.size(); ++i) {
          m[i] = mu * m[i] + g[i] + wd * w[i];
          w[i] -= rate * m[i];
        }
      }
    }
  }

  std::uint64_t steps() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<Scalar>> m_;
  std::vector<std::vector<Scalar>> v_;
  std::uint64_t t_ = 0;
};

/// Linear ramp from 0 to `base` over `warmup` steps, constant afterwards.
/// `step` is 1-based.
inline double warmup_lr(double base, std::uint64_t step, std::uint64_t warmup) {
  if (warmup == 0 || step >= warmup) return base;
  return base * static_cast<double>(step) / static_cast<double>(warmup);
}

}  // namespace apd
