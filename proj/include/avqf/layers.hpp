#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "avqf/ops.hpp"
#include "avqf/tensor.hpp"

namespace avqf {

template <typename Real>
using NamedTensors = std::vector<std::pair<std::string, Tensor<Real>>>;

template <typename Real>
struct Linear {
  Tensor<Real> w;  // [in, out]
  Tensor<Real> b;  // [out]

  static Linear seeded(int in, int out, RngState& rng, bool trainable) {
    Linear l;
    l.w = seeded_init<Real>({static_cast<size_t>(in), static_cast<size_t>(out)},
                            InitScheme::kUniformScaled, rng, trainable);
    l.b = seeded_init<Real>({static_cast<size_t>(out)}, InitScheme::kZeros, rng, trainable);
    return l;
  }

  Tensor<Real> forward(const Tensor<Real>& x) const { return add_bias(matmul(x, w), b); }

  void collect(const std::string& prefix, NamedTensors<Real>& out) const {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
  }
};

template <typename Real>
struct LayerNormParams {
  Tensor<Real> gamma;
  Tensor<Real> beta;
  Real eps = Real(1e-5);

  static LayerNormParams seeded(int d, RngState& rng, bool trainable) {
    LayerNormParams ln;
    ln.gamma = seeded_init<Real>({static_cast<size_t>(d)}, InitScheme::kOnes, rng, trainable);
    ln.beta = seeded_init<Real>({static_cast<size_t>(d)}, InitScheme::kZeros, rng, trainable);
    return ln;
  }

  Tensor<Real> forward(const Tensor<Real>& x) const { return layer_norm(x, gamma, beta, eps); }

  void collect(const std::string& prefix, NamedTensors<Real>& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

// Multi-head attention over row sequences. Queries come from q_in, keys and
// values from kv_in; with causal=true position t only attends to <= t.
// attn_sink, when given, receives each head's softmaxed weight matrix.
template <typename Real>
struct MultiHeadAttention {
  int num_heads = 1;
  Linear<Real> wq, wk, wv, wo;

  static MultiHeadAttention seeded(int d_model, int heads, RngState& rng, bool trainable) {
    MultiHeadAttention a;
    a.num_heads = heads;
    a.wq = Linear<Real>::seeded(d_model, d_model, rng, trainable);
    a.wk = Linear<Real>::seeded(d_model, d_model, rng, trainable);
    a.wv = Linear<Real>::seeded(d_model, d_model, rng, trainable);
    a.wo = Linear<Real>::seeded(d_model, d_model, rng, trainable);
    return a;
  }

  Tensor<Real> forward(const Tensor<Real>& q_in, const Tensor<Real>& kv_in, bool causal,
                       std::vector<Tensor<Real>>* attn_sink = nullptr) const {
    const size_t d = q_in.shape().back();
    const size_t dh = d / static_cast<size_t>(num_heads);
    const size_t lq = q_in.extent(0), lk = kv_in.extent(0);

    Tensor<Real> q = wq.forward(q_in);
    Tensor<Real> k = wk.forward(kv_in);
    Tensor<Real> v = wv.forward(kv_in);

    Tensor<Real> mask;
    if (causal) {
      if (lq != lk) throw ShapeError("attention: causal mask needs square attention");
      mask = Tensor<Real>::zeros({lq, lk});
      for (size_t i = 0; i < lq; ++i)
        for (size_t j = i + 1; j < lk; ++j) mask.at(i, j) = Real(-1e30);
    }

    const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(dh));
    std::vector<Tensor<Real>> heads;
    heads.reserve(static_cast<size_t>(num_heads));
    for (int h = 0; h < num_heads; ++h) {
      Tensor<Real> qh = slice(q, 1, h * dh, dh);
      Tensor<Real> kh = slice(k, 1, h * dh, dh);
      Tensor<Real> vh = slice(v, 1, h * dh, dh);
      Tensor<Real> scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
      if (causal) scores = add(scores, mask);
      Tensor<Real> attn = softmax(scores, 1);
      if (attn_sink) attn_sink->push_back(attn);
      heads.push_back(matmul(attn, vh));
    }
    return wo.forward(concat(heads, 1));
  }

  void collect(const std::string& prefix, NamedTensors<Real>& out) const {
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    wo.collect(prefix + ".wo", out);
  }
};

// Pre-norm transformer block used by the frozen encoder and the frozen LM.
template <typename Real>
struct TransformerBlock {
  LayerNormParams<Real> ln1, ln2;
  MultiHeadAttention<Real> attn;
  Linear<Real> ff1, ff2;

  static TransformerBlock seeded(int d_model, int heads, int d_ff, RngState& rng,
                                 bool trainable) {
    TransformerBlock b;
    b.ln1 = LayerNormParams<Real>::seeded(d_model, rng, trainable);
    b.ln2 = LayerNormParams<Real>::seeded(d_model, rng, trainable);
    b.attn = MultiHeadAttention<Real>::seeded(d_model, heads, rng, trainable);
    b.ff1 = Linear<Real>::seeded(d_model, d_ff, rng, trainable);
    b.ff2 = Linear<Real>::seeded(d_ff, d_model, rng, trainable);
    return b;
  }

  Tensor<Real> forward(const Tensor<Real>& x, bool causal) const {
    Tensor<Real> u = ln1.forward(x);
    Tensor<Real> h = add(x, attn.forward(u, u, causal));
    Tensor<Real> w = ln2.forward(h);
    return add(h, ff2.forward(gelu(ff1.forward(w))));
  }

  void collect(const std::string& prefix, NamedTensors<Real>& out) const {
    ln1.collect(prefix + ".ln1", out);
    ln2.collect(prefix + ".ln2", out);
    attn.collect(prefix + ".attn", out);
    ff1.collect(prefix + ".ff1", out);
    ff2.collect(prefix + ".ff2", out);
  }
};

}  // namespace avqf
