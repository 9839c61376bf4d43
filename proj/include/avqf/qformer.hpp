#pragma once

#include <optional>
#include <string>
#include <vector>

#include "avqf/config.hpp"
#include "avqf/encoders.hpp"
#include "avqf/layers.hpp"

namespace avqf {

// Fixed-length branch output projected into the LM embedding space.
template <typename Real>
struct SoftPromptSegment {
  Tensor<Real> vectors;  // [num_queries, d_llm]
  Modality modality = Modality::kVideo;
};

// One Q-Former layer: self-attention over the queries, cross-attention with
// the queries attending into the inputs, then feed-forward; each sub-block
// is residual + layer norm.
template <typename Real>
struct QFormerLayer {
  MultiHeadAttention<Real> self_attn;
  MultiHeadAttention<Real> cross_attn;
  Linear<Real> ff1, ff2;
  LayerNormParams<Real> ln_self, ln_cross, ln_ff;

  static QFormerLayer seeded(const QFormerConfig& cfg, RngState& rng, bool trainable) {
    QFormerLayer l;
    l.self_attn = MultiHeadAttention<Real>::seeded(cfg.d_model, cfg.num_heads, rng, trainable);
    l.cross_attn = MultiHeadAttention<Real>::seeded(cfg.d_model, cfg.num_heads, rng, trainable);
    l.ff1 = Linear<Real>::seeded(cfg.d_model, cfg.d_ff, rng, trainable);
    l.ff2 = Linear<Real>::seeded(cfg.d_ff, cfg.d_model, rng, trainable);
    l.ln_self = LayerNormParams<Real>::seeded(cfg.d_model, rng, trainable);
    l.ln_cross = LayerNormParams<Real>::seeded(cfg.d_model, rng, trainable);
    l.ln_ff = LayerNormParams<Real>::seeded(cfg.d_model, rng, trainable);
    return l;
  }

  Tensor<Real> forward(const Tensor<Real>& q, const Tensor<Real>& kv,
                       std::vector<Tensor<Real>>* attn_sink = nullptr) const {
    Tensor<Real> x = ln_self.forward(add(q, self_attn.forward(q, q, false, attn_sink)));
    x = ln_cross.forward(add(x, cross_attn.forward(x, kv, false, attn_sink)));
    return ln_ff.forward(add(x, ff2.forward(gelu(ff1.forward(x)))));
  }

  void collect(const std::string& prefix, NamedTensors<Real>& out) const {
    self_attn.collect(prefix + ".self_attn", out);
    cross_attn.collect(prefix + ".cross_attn", out);
    ff1.collect(prefix + ".ff1", out);
    ff2.collect(prefix + ".ff2", out);
    ln_self.collect(prefix + ".ln_self", out);
    ln_cross.collect(prefix + ".ln_cross", out);
    ln_ff.collect(prefix + ".ln_ff", out);
  }
};

// Querying transformer: compresses a variable-length input sequence into
// num_queries learned query embeddings. Output length never depends on the
// input length.
template <typename Real>
struct QFormer {
  QFormerConfig cfg;
  int d_in = 0;
  Tensor<Real> query_tokens;             // [num_queries, d_model]
  std::optional<Linear<Real>> adapter;   // present iff d_in != d_model
  std::vector<QFormerLayer<Real>> layers;

  static QFormer seeded(const QFormerConfig& cfg, int d_in, RngState& rng, bool trainable) {
    QFormer q;
    q.cfg = cfg;
    q.d_in = d_in;
    q.query_tokens = seeded_init<Real>({static_cast<size_t>(cfg.num_queries),
                                        static_cast<size_t>(cfg.d_model)},
                                       InitScheme::kUniformScaled, rng, trainable);
    if (d_in != cfg.d_model) {
      q.adapter = Linear<Real>::seeded(d_in, cfg.d_model, rng, trainable);
    }
    for (int i = 0; i < cfg.num_layers; ++i) {
      q.layers.push_back(QFormerLayer<Real>::seeded(cfg, rng, trainable));
    }
    return q;
  }

  // inputs: [L_in, d_in] -> [num_queries, d_model]
  Tensor<Real> forward(const Tensor<Real>& inputs,
                       std::vector<Tensor<Real>>* attn_sink = nullptr) const {
    if (inputs.rank() != 2 || inputs.extent(1) != static_cast<size_t>(d_in)) {
      throw ShapeError("qformer_forward: input " + shape_str(inputs.shape()) +
                       " incompatible with expected width " + std::to_string(d_in));
    }
    if (inputs.extent(0) < 1) throw ShapeError("qformer_forward: empty input sequence");
    Tensor<Real> kv = adapter ? adapter->forward(inputs) : inputs;
    Tensor<Real> q = query_tokens;
    for (const auto& layer : layers) q = layer.forward(q, kv, attn_sink);
    return q;
  }

  void collect(const std::string& prefix, NamedTensors<Real>& out) const {
    out.emplace_back(prefix + ".query_tokens", query_tokens);
    if (adapter) adapter->collect(prefix + ".adapter", out);
    for (size_t i = 0; i < layers.size(); ++i) {
      layers[i].collect(prefix + ".layer" + std::to_string(i), out);
    }
  }
};

// A full branch: learnable temporal position table, Q-Former, and the linear
// projection into the LM embedding width.
template <typename Real>
struct Branch {
  Modality tag = Modality::kVideo;
  Tensor<Real> pos_table;  // [max_positions, feature width]
  QFormer<Real> qformer;
  Linear<Real> proj;  // [d_model, d_llm]

  static Branch seeded(Modality tag, const QFormerConfig& cfg, int d_feat, int d_llm,
                       RngState rng, bool trainable = true) {
    Branch b;
    b.tag = tag;
    b.pos_table = seeded_init<Real>({static_cast<size_t>(cfg.max_positions),
                                     static_cast<size_t>(d_feat)},
                                    InitScheme::kUniformScaled, rng, trainable);
    b.qformer = QFormer<Real>::seeded(cfg, d_feat, rng, trainable);
    b.proj = Linear<Real>::seeded(cfg.d_model, d_llm, rng, trainable);
    return b;
  }

  // features: [P, K, d_feat] (video) or [P, d_feat] (audio segments).
  // Position row p is added to every vector of temporal index p, frames are
  // flattened to one key/value sequence, and the fixed-length Q-Former output
  // is projected to d_llm.
  SoftPromptSegment<Real> forward(const Tensor<Real>& features,
                                  std::vector<Tensor<Real>>* attn_sink = nullptr) const {
    Tensor<Real> x = add_position(features, pos_table);
    if (x.rank() == 3) {
      x = reshape(x, {x.extent(0) * x.extent(1), x.extent(2)});
    } else if (x.rank() != 2) {
      throw ShapeError("branch forward: features must be rank 2 or 3");
    }
    Tensor<Real> q = qformer.forward(x, attn_sink);
    SoftPromptSegment<Real> seg;
    seg.vectors = proj.forward(q);
    seg.modality = tag;
    return seg;
  }

  SoftPromptSegment<Real> forward_video(const VideoEmbedding<Real>& v,
                                        std::vector<Tensor<Real>>* attn_sink = nullptr) const {
    return forward(v.v, attn_sink);
  }

  SoftPromptSegment<Real> forward_audio(const AudioSegmentEmbeddings<Real>& a,
                                        std::vector<Tensor<Real>>* attn_sink = nullptr) const {
    return forward(a.a, attn_sink);
  }

  void collect(const std::string& pos_name, const std::string& qf_name,
               const std::string& proj_name, NamedTensors<Real>& out) const {
    out.emplace_back(pos_name + ".table", pos_table);
    qformer.collect(qf_name, out);
    proj.collect(proj_name, out);
  }
};

}  // namespace avqf
