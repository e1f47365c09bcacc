#pragma once

// Energy network scoring a candidate asymptote: four affine layers with GELU
// in between, mapping (AP', p'_1..p'_N) to exp(.) = (a, b, d).

#include <Eigen/Dense>

#include <cmath>
#include <istream>
#include <optional>
#include <ostream>
#include <vector>

#include "apd/binary_io.hpp"
#include "apd/common.hpp"
#include "apd/optim.hpp"

namespace apd {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VecD = Eigen::VectorXd;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_deriv(double x) {
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

struct MlpLayer {
  MatD w;  // out x in
  VecD b;
};

struct MlpForward {
  MatD input;                 // M x in, after dropout
  std::vector<MatD> pre;      // pre-activations of the hidden layers
  std::vector<MatD> post;     // GELU outputs of the hidden layers
  MatD raw;                   // M x 3
  MatD params;                // exp(raw): columns a, b, d
};

class EnergyMLP {
 public:
  static constexpr std::size_t kLayers = 4;
  static constexpr std::uint32_t kFormatVersion = 1;

  EnergyMLP() = default;

  /// `n_models` probabilities plus the asymptote make the input. Hidden
  /// layers use U(-1/sqrt(fan_in), 1/sqrt(fan_in)); the output layer starts
  /// at exactly zero so every initial curve is (1, 1, 1).
  EnergyMLP(std::size_t n_models, std::size_t hidden, std::uint64_t seed, double dropout = 0.5)
      : n_models_(n_models), dropout_(dropout) {
    require(n_models >= 2 && hidden >= 1, "invalid energy network shape");
    require(dropout >= 0.0 && dropout < 1.0, "dropout probability must be in [0,1)");
    Rng rng(seed);
    const std::size_t dims[kLayers + 1] = {n_models + 1, hidden, hidden, hidden, 3};
    for (std::size_t l = 0; l < kLayers; ++l) {
      MlpLayer layer{MatD::Zero(static_cast<Eigen::Index>(dims[l + 1]), static_cast<Eigen::Index>(dims[l])),
                     VecD::Zero(static_cast<Eigen::Index>(dims[l + 1]))};
      if (l + 1 < kLayers) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(dims[l]));
        for (Eigen::Index i = 0; i < layer.w.size(); ++i) layer.w.data()[i] = uniform(rng, -bound, bound);
        for (Eigen::Index i = 0; i < layer.b.size(); ++i) layer.b[i] = uniform(rng, -bound, bound);
      }
      layers_.push_back(std::move(layer));
    }
  }

  std::size_t n_models() const { return n_models_; }
  std::size_t input_dim() const { return n_models_ + 1; }
  std::size_t hidden() const { return static_cast<std::size_t>(layers_[0].w.rows()); }
  double dropout() const { return dropout_; }
  std::vector<MlpLayer>& layers() { return layers_; }
  const std::vector<MlpLayer>& layers() const { return layers_; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.w.size() + l.b.size());
    return n;
  }

  static EnergyMLP zeros_like(const EnergyMLP& o) {
    EnergyMLP z = o;
    for (auto& l : z.layers_) {
      l.w.setZero();
      l.b.setZero();
    }
    return z;
  }

  /// Inverted dropout on the probabilities of models 3..N-1 (1-based), i.e.
  /// input columns 3..N-1; column 0 is the asymptote.
  MatD apply_dropout(const MatD& x, Rng& rng) const {
    MatD out = x;
    const double keep_scale = 1.0 / (1.0 - dropout_);
    for (Eigen::Index r = 0; r < out.rows(); ++r)
      for (std::size_t m = 2; m + 1 < n_models_; ++m) {
        auto& v = out(r, static_cast<Eigen::Index>(m + 1));
        v = uniform01(rng) < dropout_ ? 0.0 : v * keep_scale;
      }
    return out;
  }

  /// Batched forward over rows of `x` (M x input_dim). Dropout applies only
  /// when an rng is supplied.
  MlpForward forward(const MatD& x, Rng* dropout_rng = nullptr) const {
    require(static_cast<std::size_t>(x.cols()) == input_dim(), "energy network input width mismatch");
    for (Eigen::Index i = 0; i < x.size(); ++i)
      if (!std::isfinite(x.data()[i])) throw InvalidArgument("non-finite energy network input");
    MlpForward f;
    f.input = dropout_rng && dropout_ > 0.0 ? apply_dropout(x, *dropout_rng) : x;
    const MatD* h = &f.input;
    for (std::size_t l = 0; l + 1 < kLayers; ++l) {
      MatD z = *h * layers_[l].w.transpose();
      z.rowwise() += layers_[l].b.transpose();
      f.pre.push_back(z);
      f.post.push_back(z.unaryExpr([](double v) { return gelu(v); }));
      h = &f.post.back();
    }
    f.raw = *h * layers_.back().w.transpose();
    f.raw.rowwise() += layers_.back().b.transpose();
    f.params = f.raw.array().exp();
    return f;
  }

  /// (a, b, d) for one input row.
  std::array<double, 3> curve_params(double ap, std::span<const double> probs) const {
    MatD x(1, static_cast<Eigen::Index>(input_dim()));
    x(0, 0) = ap;
    for (std::size_t i = 0; i < probs.size(); ++i) x(0, static_cast<Eigen::Index>(i + 1)) = probs[i];
    const auto f = forward(x);
    return {f.params(0, 0), f.params(0, 1), f.params(0, 2)};
  }

  /// Backward from d loss / d (a, b, d) (M x 3). Accumulates parameter
  /// gradients into `grad` and returns d loss / d input (M x input_dim).
  MatD backward(const MlpForward& f, const MatD& dparams, EnergyMLP& grad) const {
    MatD delta = dparams.cwiseProduct(f.params);  // through exp
    for (std::size_t l = kLayers; l-- > 0;) {
      const MatD& in = l == 0 ? f.input : f.post[l - 1];
      grad.layers_[l].w.noalias() += delta.transpose() * in;
      grad.layers_[l].b += delta.colwise().sum().transpose();
      MatD dx = delta * layers_[l].w;
      if (l == 0) return dx;
      delta = dx.cwiseProduct(f.pre[l - 1].unaryExpr([](double v) { return gelu_deriv(v); }));
    }
    return {};
  }

  std::vector<std::span<double>> spans() {
    std::vector<std::span<double>> out;
    for (auto& l : layers_) {
      out.emplace_back(l.w.data(), static_cast<std::size_t>(l.w.size()));
      out.emplace_back(l.b.data(), static_cast<std::size_t>(l.b.size()));
    }
    return out;
  }

  void save(std::ostream& out) const {
    binio::Writer w(out);
    w.raw("APDMLP\0\0", 8);
    w.u32(kFormatVersion);
    w.u32(static_cast<std::uint32_t>(n_models_));
    w.pod(dropout_);
    w.u32(static_cast<std::uint32_t>(layers_.size()));
    for (const auto& l : layers_) {
      w.u32(static_cast<std::uint32_t>(l.w.rows()));
      w.u32(static_cast<std::uint32_t>(l.w.cols()));
    }
    for (const auto& l : layers_) {
      w.raw(l.w.data(), static_cast<std::size_t>(l.w.size()) * sizeof(double));
      w.raw(l.b.data(), static_cast<std::size_t>(l.b.size()) * sizeof(double));
    }
    const auto sum = w.checksum();
    w.u64(sum);
  }

  static EnergyMLP load(std::istream& in, const std::string& what) {
    binio::Reader r(in, what);
    char magic[8];
    r.raw(magic, 8);
    if (std::memcmp(magic, "APDMLP\0\0", 8) != 0) r.fail("missing energy network section");
    if (r.u32() != kFormatVersion) r.fail("unsupported energy network version");
    EnergyMLP m;
    m.n_models_ = r.u32();
    m.dropout_ = r.pod<double>();
    const auto n = r.u32();
    if (n != kLayers) r.fail("expected 4 layers");
    std::vector<std::pair<std::uint32_t, std::uint32_t>> shapes(n);
    for (auto& [rows, cols] : shapes) {
      rows = r.u32();
      cols = r.u32();
      if (rows == 0 || cols == 0 || rows > 100000 || cols > 100000) r.fail("implausible layer shape");
    }
    for (auto [rows, cols] : shapes) {
      MlpLayer l{MatD(rows, cols), VecD(rows)};
      r.raw(l.w.data(), static_cast<std::size_t>(l.w.size()) * sizeof(double));
      r.raw(l.b.data(), static_cast<std::size_t>(l.b.size()) * sizeof(double));
      m.layers_.push_back(std::move(l));
    }
    const auto expected = r.checksum();
    if (r.u64() != expected) r.fail("checksum mismatch");
    if (m.layers_[0].w.cols() != static_cast<Eigen::Index>(m.n_models_ + 1) || m.layers_.back().w.rows() != 3)
      r.fail("energy network shape does not match its model count");
    return m;
  }

  bool operator==(const EnergyMLP& o) const {
    if (n_models_ != o.n_models_ || layers_.size() != o.layers_.size()) return false;
    for (std::size_t l = 0; l < layers_.size(); ++l)
      if (layers_[l].w != o.layers_[l].w || layers_[l].b != o.layers_[l].b) return false;
    return true;
  }

 private:
  std::size_t n_models_ = 0;
  double dropout_ = 0.5;
  std::vector<MlpLayer> layers_;
};

inline std::vector<ParamRef<double>> param_refs(EnergyMLP& value, EnergyMLP& grad) {
  std::vector<ParamRef<double>> refs;
  auto v = value.spans();
  auto g = grad.spans();
  for (std::size_t i = 0; i < v.size(); ++i) refs.push_back({v[i], g[i]});
  return refs;
}

}  // namespace apd
