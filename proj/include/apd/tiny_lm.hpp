#pragma once

// Fixed-window feedforward language model:
//   embed k tokens -> concat -> tanh(W1 x + b1) -> tanh(W2 h1 + b2) -> W3 h2 + b3.
// Parameters are float32; batched forward/backward run on Eigen GEMMs.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "apd/binary_io.hpp"
#include "apd/common.hpp"
#include "apd/optim.hpp"

namespace apd {

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VecF = Eigen::VectorXf;

struct LmShape {
  std::size_t vocab = 0;
  std::size_t window = 0;  // k
  std::size_t embed = 0;
  std::size_t hidden1 = 0;
  std::size_t hidden2 = 0;

  std::size_t input_width() const { return window * embed; }

  std::size_t param_count() const {
    return vocab * embed + (input_width() * hidden1 + hidden1) + (hidden1 * hidden2 + hidden2) +
           (hidden2 * vocab + vocab);
  }

  bool operator==(const LmShape&) const = default;
};

/// Parameter (or gradient) tensors of a TinyLM.
struct LmTensors {
  MatF embedding;  // V x e
  MatF w1;         // H1 x k*e
  VecF b1;
  MatF w2;  // H2 x H1
  VecF b2;
  MatF w3;  // V x H2
  VecF b3;

  static LmTensors zeros(const LmShape& s) {
    LmTensors t;
    t.embedding = MatF::Zero(static_cast<Eigen::Index>(s.vocab), static_cast<Eigen::Index>(s.embed));
    t.w1 = MatF::Zero(static_cast<Eigen::Index>(s.hidden1), static_cast<Eigen::Index>(s.input_width()));
    t.b1 = VecF::Zero(static_cast<Eigen::Index>(s.hidden1));
    t.w2 = MatF::Zero(static_cast<Eigen::Index>(s.hidden2), static_cast<Eigen::Index>(s.hidden1));
    t.b2 = VecF::Zero(static_cast<Eigen::Index>(s.hidden2));
    t.w3 = MatF::Zero(static_cast<Eigen::Index>(s.vocab), static_cast<Eigen::Index>(s.hidden2));
    t.b3 = VecF::Zero(static_cast<Eigen::Index>(s.vocab));
    return t;
  }

  std::array<std::span<float>, 7> spans() {
    return {std::span<float>(embedding.data(), static_cast<std::size_t>(embedding.size())),
            std::span<float>(w1.data(), static_cast<std::size_t>(w1.size())),
            std::span<float>(b1.data(), static_cast<std::size_t>(b1.size())),
            std::span<float>(w2.data(), static_cast<std::size_t>(w2.size())),
            std::span<float>(b2.data(), static_cast<std::size_t>(b2.size())),
            std::span<float>(w3.data(), static_cast<std::size_t>(w3.size())),
            std::span<float>(b3.data(), static_cast<std::size_t>(b3.size()))};
  }

  std::array<std::span<const float>, 7> spans() const {
    auto s = const_cast<LmTensors*>(this)->spans();
    std::array<std::span<const float>, 7> out;
    for (std::size_t i = 0; i < 7; ++i) out[i] = s[i];
    return out;
  }

  void set_zero() {
    for (auto s : spans()) std::fill(s.begin(), s.end(), 0.0f);
  }

  bool operator==(const LmTensors& o) const {
    auto a = spans();
    auto b = o.spans();
    for (std::size_t i = 0; i < 7; ++i)
      if (a[i].size() != b[i].size() || std::memcmp(a[i].data(), b[i].data(), a[i].size_bytes()) != 0)
        return false;
    return true;
  }
};

/// Activations kept from a batched forward pass for the backward pass.
struct LmForwardCache {
  std::vector<TokenSeq> contexts;
  MatF x;       // B x k*e
  MatF h1;      // B x H1
  MatF h2;      // B x H2
  MatF logits;  // B x V
};

class TinyLM {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  TinyLM() = default;

  /// Embeddings ~ N(0, 1); affine weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  TinyLM(const LmShape& shape, std::uint64_t init_seed) : shape_(shape), p_(LmTensors::zeros(shape)) {
    require(shape.vocab >= 2 && shape.window >= 1 && shape.embed >= 1 && shape.hidden1 >= 1 &&
                shape.hidden2 >= 1,
            "invalid TinyLM shape");
    Rng rng(init_seed);
    for (auto& v : p_.spans()[0]) v = static_cast<float>(normal01(rng));
    auto init_affine = [&](std::span<float> w, std::span<float> b, std::size_t fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (auto& v : w) v = static_cast<float>(uniform(rng, -bound, bound));
      for (auto& v : b) v = static_cast<float>(uniform(rng, -bound, bound));
    };
    auto s = p_.spans();
    init_affine(s[1], s[2], shape.input_width());
    init_affine(s[3], s[4], shape.hidden1);
    init_affine(s[5], s[6], shape.hidden2);
  }

  TinyLM(const LmShape& shape, LmTensors params) : shape_(shape), p_(std::move(params)) {}

  const LmShape& shape() const { return shape_; }
  std::size_t vocab_size() const { return shape_.vocab; }
  std::size_t window() const { return shape_.window; }
  std::size_t param_count() const { return shape_.param_count(); }
  double log_size() const { return std::log(static_cast<double>(param_count())); }

  const LmTensors& params() const { return p_; }
  LmTensors& params() { return p_; }

  /// Number of trainable scalars, counted from the stored tensors.
  std::size_t count_scalars() const {
    std::size_t n = 0;
    for (auto s : p_.spans()) n += s.size();
    return n;
  }

  void check_context(std::span<const TokenId> ctx) const {
    for (auto id : ctx)
      require(id >= 0 && static_cast<std::size_t>(id) < shape_.vocab,
              "context token id " + std::to_string(id) + " outside vocabulary of size " +
                  std::to_string(shape_.vocab));
  }

  /// Truncates to the last k tokens or left-pads with the pad id (1).
  TokenSeq fit_window(std::span<const TokenId> ctx) const {
    TokenSeq w(shape_.window, 1);
    const std::size_t n = std::min(shape_.window, ctx.size());
    for (std::size_t i = 0; i < n; ++i) w[shape_.window - n + i] = ctx[ctx.size() - n + i];
    return w;
  }

  LmForwardCache forward(const std::vector<TokenSeq>& contexts) const {
    LmForwardCache c;
    const auto B = static_cast<Eigen::Index>(contexts.size());
    const auto e = static_cast<Eigen::Index>(shape_.embed);
    c.contexts.reserve(contexts.size());
    c.x.resize(B, static_cast<Eigen::Index>(shape_.input_width()));
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto& raw = contexts[static_cast<std::size_t>(b)];
      check_context(raw);
      c.contexts.push_back(raw.size() == shape_.window ? raw : fit_window(raw));
      const auto& ctx = c.contexts.back();
      for (std::size_t j = 0; j < shape_.window; ++j)
        c.x.row(b).segment(static_cast<Eigen::Index>(j) * e, e) = p_.embedding.row(ctx[j]);
    }
    c.h1.noalias() = c.x * p_.w1.transpose();
    c.h1.rowwise() += p_.b1.transpose();
    c.h1 = c.h1.array().tanh();
    c.h2.noalias() = c.h1 * p_.w2.transpose();
    c.h2.rowwise() += p_.b2.transpose();
    c.h2 = c.h2.array().tanh();
    c.logits.noalias() = c.h2 * p_.w3.transpose();
    c.logits.rowwise() += p_.b3.transpose();
    return c;
  }

  /// Logit vector of length V for one context.
  std::vector<float> logits(std::span<const TokenId> context) const {
    auto c = forward({TokenSeq(context.begin(), context.end())});
    const float* row = c.logits.data();
    return std::vector<float>(row, row + shape_.vocab);
  }

  std::vector<double> probabilities(std::span<const TokenId> context) const {
    return softmax(logits(context));
  }

  /// Accumulates parameter gradients for an upstream gradient on the logits
  /// (B x V) into `grad` (not zeroed here).
  void backward(const LmForwardCache& c, const MatF& dlogits, LmTensors& grad) const {
    require(dlogits.rows() == c.logits.rows() && dlogits.cols() == c.logits.cols(),
            "logit gradient shape mismatch");
    grad.w3.noalias() += dlogits.transpose() * c.h2;
    grad.b3 += dlogits.colwise().sum().transpose();
    MatF da2 = dlogits * p_.w3;
    da2.array() *= (1.0f - c.h2.array().square());
    grad.w2.noalias() += da2.transpose() * c.h1;
    grad.b2 += da2.colwise().sum().transpose();
    MatF da1 = da2 * p_.w2;
    da1.array() *= (1.0f - c.h1.array().square());
    grad.w1.noalias() += da1.transpose() * c.x;
    grad.b1 += da1.colwise().sum().transpose();
    MatF dx = da1 * p_.w1;
    const auto e = static_cast<Eigen::Index>(shape_.embed);
    for (Eigen::Index b = 0; b < dx.rows(); ++b) {
      const auto& ctx = c.contexts[static_cast<std::size_t>(b)];
      for (std::size_t j = 0; j < shape_.window; ++j)
        grad.embedding.row(ctx[j]) += dx.row(b).segment(static_cast<Eigen::Index>(j) * e, e);
    }
  }

  /// Mean next-token cross-entropy (nats) of a batch and, optionally, its
  /// gradient with respect to the logits.
  static double cross_entropy(const MatF& logits, std::span<const TokenId> targets, MatF* dlogits) {
    const auto B = logits.rows();
    double total = 0.0;
    if (dlogits) dlogits->resize(B, logits.cols());
    for (Eigen::Index b = 0; b < B; ++b) {
      const float mx = logits.row(b).maxCoeff();
      double z = 0.0;
      for (Eigen::Index v = 0; v < logits.cols(); ++v) z += std::exp(static_cast<double>(logits(b, v) - mx));
      const auto t = targets[static_cast<std::size_t>(b)];
      total += std::log(z) - static_cast<double>(logits(b, t) - mx);
      if (dlogits) {
        for (Eigen::Index v = 0; v < logits.cols(); ++v)
          (*dlogits)(b, v) = static_cast<float>(std::exp(static_cast<double>(logits(b, v) - mx)) / z /
                                                static_cast<double>(B));
        (*dlogits)(b, t) -= 1.0f / static_cast<float>(B);
      }
    }
    return total / static_cast<double>(B);
  }

  // ---- binary container -------------------------------------------------

  void save(std::ostream& out, const std::string& vocab_hash) const {
    binio::Writer w(out);
    w.raw("APDLM\0\0\0", 8);
    w.u32(kFormatVersion);
    w.str(vocab_hash);
    w.u32(static_cast<std::uint32_t>(shape_.window));
    const auto shapes = tensor_shapes();
    w.u32(static_cast<std::uint32_t>(shapes.size()));
    for (auto [r, c] : shapes) {
      w.u32(static_cast<std::uint32_t>(r));
      w.u32(static_cast<std::uint32_t>(c));
    }
    for (auto s : p_.spans()) w.raw(s.data(), s.size_bytes());
    const auto sum = w.checksum();
    w.u64(sum);
  }

  /// Reads a model; `expected_vocab_hash` (if non-empty) must match.
  static TinyLM load(std::istream& in, const std::string& expected_vocab_hash, const std::string& what) {
    binio::Reader r(in, what);
    char magic[8];
    r.raw(magic, 8);
    if (std::memcmp(magic, "APDLM\0\0\0", 8) != 0) r.fail("not a model file (bad magic)");
    const auto version = r.u32();
    if (version != kFormatVersion)
      r.fail("unsupported format version " + std::to_string(version));
    const auto vocab_hash = r.str(64);
    if (!expected_vocab_hash.empty() && vocab_hash != expected_vocab_hash)
      throw InvalidArgument(what + ": vocabulary hash mismatch (file " + vocab_hash + ", expected " +
                            expected_vocab_hash + ")");
    LmShape s;
    s.window = r.u32();
    const auto n = r.u32();
    if (n != 7) r.fail("expected 7 tensors, found " + std::to_string(n));
    std::array<std::pair<std::size_t, std::size_t>, 7> shp;
    for (auto& [rows, cols] : shp) {
      rows = r.u32();
      cols = r.u32();
    }
    s.vocab = shp[0].first;
    s.embed = shp[0].second;
    s.hidden1 = shp[1].first;
    s.hidden2 = shp[3].first;
    TinyLM m;
    m.shape_ = s;
    if (m.tensor_shapes() != shp || s.window == 0) r.fail("inconsistent layer shapes");
    m.p_ = LmTensors::zeros(s);
    for (auto span : m.p_.spans()) r.raw(span.data(), span.size_bytes());
    const auto expected = r.checksum();
    if (r.u64() != expected) r.fail("checksum mismatch");
    return m;
  }

  std::array<std::pair<std::size_t, std::size_t>, 7> tensor_shapes() const {
    const auto& s = shape_;
    return {{{s.vocab, s.embed},
             {s.hidden1, s.input_width()},
             {s.hidden1, 1},
             {s.hidden2, s.hidden1},
             {s.hidden2, 1},
             {s.vocab, s.hidden2},
             {s.vocab, 1}}};
  }

 private:
  LmShape shape_;
  LmTensors p_;
};

inline std::vector<ParamRef<float>> param_refs(LmTensors& value, LmTensors& grad) {
  std::vector<ParamRef<float>> refs;
  auto v = value.spans();
  auto g = grad.spans();
  for (std::size_t i = 0; i < v.size(); ++i) refs.push_back({v[i], g[i]});
  return refs;
}

}  // namespace apd
