#pragma once

#include <optional>
#include <string>
#include <vector>

#include "avqf/config.hpp"
#include "avqf/layers.hpp"
#include "avqf/qformer.hpp"

namespace avqf {

// Byte-level tokenizer: ids 0..255 are raw bytes, plus three specials.
constexpr int kBosId = 256;
constexpr int kEosId = 257;
constexpr int kPadId = 258;
constexpr int kVocabSize = 259;

constexpr const char* kUserPrefix = "USER: ";
constexpr const char* kAssistantPrefix = "\nASSISTANT: ";

inline std::vector<int> bytes_of(const std::string& s) {
  std::vector<int> ids;
  ids.reserve(s.size());
  for (unsigned char c : s) ids.push_back(static_cast<int>(c));
  return ids;
}

// Back to text: stops at the first EOS, skips BOS/PAD.
inline std::string string_of(const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (id == kEosId) break;
    if (id == kBosId || id == kPadId) continue;
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

// Token ids plus a per-position loss mask. mask[t] marks token t as a
// prediction target: the loss reads logits at t-1 (targets shifted by one).
struct TokenSequence {
  std::vector<int> ids;
  std::vector<uint8_t> loss_mask;
};

// [BOS] caption [EOS]; every caption byte and the EOS are targets.
inline TokenSequence caption_sequence(const std::string& caption) {
  TokenSequence seq;
  seq.ids.push_back(kBosId);
  for (int b : bytes_of(caption)) seq.ids.push_back(b);
  seq.ids.push_back(kEosId);
  seq.loss_mask.assign(seq.ids.size(), 1);
  seq.loss_mask[0] = 0;  // BOS is never predicted
  return seq;
}

// [BOS] USER: <instruction>\nASSISTANT: <response> [EOS]; only response
// bytes and the EOS are targets.
inline TokenSequence instruction_sequence(const std::string& instruction,
                                          const std::string& response) {
  TokenSequence seq;
  seq.ids.push_back(kBosId);
  const std::string pre = std::string(kUserPrefix) + instruction + kAssistantPrefix;
  for (int b : bytes_of(pre)) seq.ids.push_back(b);
  const size_t response_start = seq.ids.size();
  for (int b : bytes_of(response)) seq.ids.push_back(b);
  seq.ids.push_back(kEosId);
  seq.loss_mask.assign(seq.ids.size(), 0);
  for (size_t t = response_start; t < seq.ids.size(); ++t) seq.loss_mask[t] = 1;
  return seq;
}

// Prompt-only sequence for generation; no loss targets.
inline TokenSequence prompt_sequence(const std::string& text) {
  TokenSequence seq;
  seq.ids.push_back(kBosId);
  for (int b : bytes_of(text)) seq.ids.push_back(b);
  seq.loss_mask.assign(seq.ids.size(), 0);
  return seq;
}

// ---------------------------------------------------------------------------
// Frozen tiny decoder-only LM
// ---------------------------------------------------------------------------

template <typename Real>
struct TinyCausalLM {
  LmConfig cfg;
  Tensor<Real> tok_emb;  // [vocab, d]
  Tensor<Real> pos_emb;  // [context, d]
  std::vector<TransformerBlock<Real>> blocks;
  LayerNormParams<Real> final_ln;

  static TinyCausalLM seeded(const LmConfig& cfg, RngState rng, bool trainable = false) {
    TinyCausalLM lm;
    lm.cfg = cfg;
    lm.tok_emb = seeded_init<Real>({static_cast<size_t>(cfg.vocab),
                                    static_cast<size_t>(cfg.d_model)},
                                   InitScheme::kUniformScaled, rng, trainable);
    lm.pos_emb = seeded_init<Real>({static_cast<size_t>(cfg.context),
                                    static_cast<size_t>(cfg.d_model)},
                                   InitScheme::kUniformScaled, rng, trainable);
    for (int i = 0; i < cfg.blocks; ++i) {
      lm.blocks.push_back(
          TransformerBlock<Real>::seeded(cfg.d_model, cfg.heads, cfg.d_ff, rng, trainable));
    }
    lm.final_ln = LayerNormParams<Real>::seeded(cfg.d_model, rng, trainable);
    return lm;
  }

  Tensor<Real> embed(const std::vector<int>& ids) const { return embedding(tok_emb, ids); }

  // embeds: [L, d] -> logits [L, vocab]. Causal: row t sees rows <= t only.
  // The output head is tied to the token embedding table.
  Tensor<Real> forward(const Tensor<Real>& embeds) const {
    if (embeds.rank() != 2 || embeds.extent(1) != static_cast<size_t>(cfg.d_model)) {
      throw ShapeError("lm_forward: expected [L," + std::to_string(cfg.d_model) + "], got " +
                       shape_str(embeds.shape()));
    }
    const size_t L = embeds.extent(0);
    if (L < 1) throw ValueError("lm_forward: empty input");
    if (L > static_cast<size_t>(cfg.context)) {
      throw CapacityError("lm_forward: sequence length " + std::to_string(L) +
                          " exceeds context " + std::to_string(cfg.context));
    }
    Tensor<Real> h = add(embeds, slice(pos_emb, 0, 0, L));
    for (const auto& b : blocks) h = b.forward(h, true);
    h = final_ln.forward(h);
    return matmul(h, transpose(tok_emb));
  }

  void set_trainable(bool trainable) {
    NamedTensors<Real> params;
    collect("lm", params);
    for (auto& [name, t] : params) t.set_requires_grad(trainable);
  }

  void collect(const std::string& prefix, NamedTensors<Real>& out) const {
    out.emplace_back(prefix + ".tok_emb", tok_emb);
    out.emplace_back(prefix + ".pos_emb", pos_emb);
    for (size_t i = 0; i < blocks.size(); ++i) {
      blocks[i].collect(prefix + ".block" + std::to_string(i), out);
    }
    final_ln.collect(prefix + ".final_ln", out);
  }
};

// ---------------------------------------------------------------------------
// Soft prompt assembly and losses
// ---------------------------------------------------------------------------

// A fully assembled LM input: media soft-prompt segments followed by text
// embeddings, with ids/mask aligned to the full sequence (PAD at soft
// positions, mask false there).
template <typename Real>
struct SoftPrompt {
  Tensor<Real> embeds;  // [L_total, d_llm]
  TokenSequence tokens;
  size_t prefix_len = 0;
};

// Concatenation order is fixed: video, then audio, then text embeddings.
template <typename Real>
SoftPrompt<Real> build_soft_prompt(const std::optional<SoftPromptSegment<Real>>& video,
                                   const std::optional<SoftPromptSegment<Real>>& audio,
                                   const TokenSequence& text, const TinyCausalLM<Real>& lm) {
  if (text.ids.empty()) throw ValueError("build_soft_prompt: empty text sequence");
  const size_t d = static_cast<size_t>(lm.cfg.d_model);
  std::vector<Tensor<Real>> parts;
  size_t prefix = 0;
  for (const auto* seg : {&video, &audio}) {
    if (!seg->has_value()) continue;
    const Tensor<Real>& v = (*seg)->vectors;
    if (v.rank() != 2 || v.extent(1) != d) {
      throw ShapeError("build_soft_prompt: segment width " + shape_str(v.shape()) +
                       " does not match LM width " + std::to_string(d));
    }
    parts.push_back(v);
    prefix += v.extent(0);
  }
  parts.push_back(lm.embed(text.ids));

  SoftPrompt<Real> out;
  out.embeds = parts.size() == 1 ? parts[0] : concat(parts, 0);
  out.prefix_len = prefix;
  out.tokens.ids.assign(prefix, kPadId);
  out.tokens.ids.insert(out.tokens.ids.end(), text.ids.begin(), text.ids.end());
  out.tokens.loss_mask.assign(prefix, 0);
  out.tokens.loss_mask.insert(out.tokens.loss_mask.end(), text.loss_mask.begin(),
                              text.loss_mask.end());
  return out;
}

// Mean next-token cross entropy (nats) over positions where loss_mask is
// true; the logit at t-1 predicts the token at t.
template <typename Real>
Tensor<Real> caption_loss(const Tensor<Real>& logits, const TokenSequence& targets) {
  if (logits.rank() != 2) throw ShapeError("caption_loss: logits must be rank-2");
  const size_t L = logits.extent(0);
  if (targets.ids.size() != L || targets.loss_mask.size() != L) {
    throw ShapeError("caption_loss: targets must align with logits length " +
                     std::to_string(L));
  }
  if (!targets.loss_mask.empty() && targets.loss_mask[0]) {
    throw ValueError("caption_loss: position 0 has no preceding logit");
  }
  std::vector<int> next_ids(L, -1);
  std::vector<uint8_t> mask(L, 0);
  for (size_t t = 1; t < L; ++t) {
    if (targets.loss_mask[t]) {
      next_ids[t - 1] = targets.ids[t];
      mask[t - 1] = 1;
    }
  }
  return cross_entropy_masked(logits, next_ids, mask);
}

// Deterministic argmax decoding; stops at EOS, max_len tokens, or the LM
// context limit. Returns the generated ids (EOS included when reached).
template <typename Real>
TokenSequence generate_greedy(const SoftPrompt<Real>& prompt, const TinyCausalLM<Real>& lm,
                              size_t max_len) {
  if (max_len < 1) throw ValueError("generate_greedy: max_len must be >= 1");
  Tensor<Real> embeds = prompt.embeds;
  TokenSequence out;
  for (size_t step = 0; step < max_len; ++step) {
    if (embeds.extent(0) >= static_cast<size_t>(lm.cfg.context)) break;
    Tensor<Real> logits = lm.forward(embeds);
    const int next = static_cast<int>(argmax_row(logits, logits.extent(0) - 1));
    out.ids.push_back(next);
    out.loss_mask.push_back(0);
    if (next == kEosId) break;
    embeds = concat<Real>({embeds, lm.embed({next})}, 0);
  }
  return out;
}

}  // namespace avqf
