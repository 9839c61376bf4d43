#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "avqf/grad_check.hpp"
#include "avqf/lm.hpp"
#include "avqf/model.hpp"

using namespace avqf;

namespace {

LmConfig small_lm() {
  LmConfig cfg;
  cfg.d_model = 32;
  cfg.blocks = 2;
  cfg.heads = 4;
  cfg.d_ff = 64;
  cfg.context = 64;
  return cfg;
}

template <typename Real>
Tensor<Real> random_embeds(size_t l, size_t d, uint64_t seed) {
  RngState rng(seed);
  std::vector<Real> v(l * d);
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-1.0, 1.0));
  return Tensor<Real>::from_data({l, d}, std::move(v));
}

}  // namespace

TEST(Tokenizer, ByteRoundTrip) {
  const std::string text = "a red square moves right";
  auto ids = bytes_of(text);
  EXPECT_EQ(ids.size(), text.size());
  EXPECT_EQ(string_of(ids), text);

  auto seq = caption_sequence(text);
  EXPECT_EQ(seq.ids.front(), kBosId);
  EXPECT_EQ(seq.ids.back(), kEosId);
  EXPECT_EQ(seq.ids.size(), text.size() + 2);
  EXPECT_EQ(string_of(seq.ids), text);
  EXPECT_EQ(seq.loss_mask[0], 0);
  for (size_t t = 1; t < seq.ids.size(); ++t) EXPECT_EQ(seq.loss_mask[t], 1);
}

TEST(Tokenizer, InstructionMaskCoversResponseOnly) {
  auto seq = instruction_sequence("what color is the shape?", "the shape is red");
  const std::string full = string_of(seq.ids);
  EXPECT_EQ(full, "USER: what color is the shape?\nASSISTANT: the shape is red");
  // masked positions spell exactly the response plus EOS
  std::string masked;
  size_t masked_count = 0;
  for (size_t t = 0; t < seq.ids.size(); ++t) {
    if (seq.loss_mask[t]) {
      ++masked_count;
      if (seq.ids[t] < 256) masked.push_back(static_cast<char>(seq.ids[t]));
    }
  }
  EXPECT_EQ(masked, "the shape is red");
  EXPECT_EQ(masked_count, std::string("the shape is red").size() + 1);  // + EOS
}

TEST(LmForward, ShapeAndErrors) {
  auto lm = TinyCausalLM<float>::seeded(small_lm(), RngState(3));
  auto logits = lm.forward(random_embeds<float>(10, 32, 4));
  EXPECT_EQ(logits.shape(), (Shape{10, 259}));
  EXPECT_THROW(lm.forward(random_embeds<float>(5, 16, 4)), ShapeError);
  EXPECT_THROW(lm.forward(random_embeds<float>(65, 32, 4)), CapacityError);
}

// Causality: logits at position t must not move when any position > t is
// perturbed.
TEST(LmForward, SuffixPerturbationLeavesPrefixLogitsUnchanged) {
  auto lm = TinyCausalLM<double>::seeded(small_lm(), RngState(5));
  auto e1 = random_embeds<double>(12, 32, 6);
  auto e2 = Tensor<double>::from_data(e1.shape(), e1.data());
  // non-uniform perturbation: a constant row shift would vanish in layer norm
  for (size_t j = 0; j < 32; ++j) {
    e2.at(9, j) += 0.37 * std::sin(static_cast<double>(j));
    e2.at(11, j) -= 1.21 * std::cos(static_cast<double>(j));
  }
  auto l1 = lm.forward(e1);
  auto l2 = lm.forward(e2);
  for (size_t t = 0; t < 9; ++t) {
    for (size_t v = 0; v < 259; ++v) {
      EXPECT_NEAR(l1.at(t, v), l2.at(t, v), 1e-6);
    }
  }
  // and the perturbed positions do change
  double moved = 0;
  for (size_t v = 0; v < 259; ++v) moved += std::abs(l1.at(9, v) - l2.at(9, v));
  EXPECT_GT(moved, 1e-3);
}

TEST(LmForward, FrozenAfterBackward) {
  auto lm = TinyCausalLM<float>::seeded(small_lm(), RngState(7));
  NamedTensors<float> before;
  lm.collect("lm", before);
  std::vector<std::vector<float>> snap;
  for (auto& [n, t] : before) snap.push_back(t.data());

  auto seg = random_embeds<float>(8, 32, 9);
  Tensor<float> trainable = Tensor<float>::from_data(seg.shape(), seg.data(), true);
  auto logits = lm.forward(trainable);
  TokenSequence seq;
  seq.ids.assign(8, 65);
  seq.loss_mask.assign(8, 1);
  seq.loss_mask[0] = 0;
  trainable.zero_grad();
  backward(caption_loss(logits, seq));
  EXPECT_TRUE(trainable.has_grad());

  NamedTensors<float> after;
  lm.collect("lm", after);
  for (size_t i = 0; i < after.size(); ++i) {
    EXPECT_FALSE(after[i].second.has_grad()) << after[i].first;
    EXPECT_EQ(after[i].second.data(), snap[i]) << after[i].first;
  }
}

TEST(CaptionLoss, NearOneHotLogitsGiveTinyLoss) {
  const size_t L = 6, V = 259;
  TokenSequence seq;
  seq.ids = {kBosId, 104, 105, 106, 107, kEosId};
  seq.loss_mask = {0, 1, 1, 1, 1, 1};
  Tensor<float> logits = Tensor<float>::zeros({L, V});
  for (size_t t = 0; t + 1 < L; ++t) {
    logits.at(t, static_cast<size_t>(seq.ids[t + 1])) = 20.0f;
  }
  auto loss = caption_loss(logits, seq);
  EXPECT_LE(loss.item(), 0.01f);
  EXPECT_GE(loss.item(), 0.0f);
}

TEST(CaptionLoss, UniformLogitsGiveLogVocab) {
  TokenSequence seq;
  seq.ids = {kBosId, 50, 60, kEosId};
  seq.loss_mask = {0, 1, 1, 1};
  Tensor<double> logits = Tensor<double>::zeros({4, 259});
  auto loss = caption_loss(logits, seq);
  EXPECT_NEAR(loss.item(), std::log(259.0), 1e-4);
}

TEST(CaptionLoss, AllFalseMaskRejected) {
  TokenSequence seq;
  seq.ids = {kBosId, 50};
  seq.loss_mask = {0, 0};
  Tensor<float> logits = Tensor<float>::zeros({2, 259});
  EXPECT_THROW(caption_loss(logits, seq), DegenerateLossError);
}

TEST(SoftPromptTest, ConcatenationOrderAndLengths) {
  ModelConfig cfg = toy_config();
  auto model = Model<float>::seeded(cfg, 11);
  const size_t d = static_cast<size_t>(cfg.lm.d_model);
  const size_t kv = static_cast<size_t>(cfg.video_qf.num_queries);
  const size_t ka = static_cast<size_t>(cfg.audio_qf.num_queries);

  SoftPromptSegment<float> video{random_embeds<float>(kv, d, 1), Modality::kVideo};
  SoftPromptSegment<float> audio{random_embeds<float>(ka, d, 2), Modality::kAudio};
  TokenSequence text = caption_sequence("hello b");

  auto both = build_soft_prompt<float>(video, audio, text, model.lm);
  EXPECT_EQ(both.embeds.extent(0), kv + ka + text.ids.size());
  EXPECT_EQ(both.prefix_len, kv + ka);
  // order video, audio, text
  EXPECT_EQ(0, std::memcmp(both.embeds.data().data(), video.vectors.data().data(),
                           kv * d * sizeof(float)));
  EXPECT_EQ(0, std::memcmp(both.embeds.data().data() + kv * d, audio.vectors.data().data(),
                           ka * d * sizeof(float)));
  for (size_t t = 0; t < both.prefix_len; ++t) {
    EXPECT_EQ(both.tokens.ids[t], kPadId);
    EXPECT_EQ(both.tokens.loss_mask[t], 0);
  }

  // no media: plain text embeddings, bitwise
  auto plain = build_soft_prompt<float>(std::nullopt, std::nullopt, text, model.lm);
  auto direct = model.lm.embed(text.ids);
  EXPECT_EQ(plain.prefix_len, 0u);
  EXPECT_EQ(0, std::memcmp(plain.embeds.data().data(), direct.data().data(),
                           direct.numel() * sizeof(float)));

  // width mismatch
  SoftPromptSegment<float> bad{random_embeds<float>(4, d + 1, 3), Modality::kVideo};
  EXPECT_THROW(build_soft_prompt<float>(bad, std::nullopt, text, model.lm), ShapeError);
}

// With no soft prompt the pipeline is exactly the standalone LM.
TEST(SoftPromptTest, PureLmReductionIsBitwise) {
  ModelConfig cfg = toy_config();
  auto model = Model<float>::seeded(cfg, 13);
  TokenSequence text = caption_sequence("abc");
  auto prompt = build_soft_prompt<float>(std::nullopt, std::nullopt, text, model.lm);
  auto via_prompt = model.lm.forward(prompt.embeds);
  auto direct = model.lm.forward(model.lm.embed(text.ids));
  EXPECT_EQ(0, std::memcmp(via_prompt.data().data(), direct.data().data(),
                           direct.numel() * sizeof(float)));
}

TEST(Greedy, DeterministicAndStopsAtEos) {
  ModelConfig cfg = toy_config();
  auto model = Model<float>::seeded(cfg, 17);
  TokenSequence text = prompt_sequence("ab");
  auto prompt = build_soft_prompt<float>(std::nullopt, std::nullopt, text, model.lm);
  auto g1 = generate_greedy(prompt, model.lm, 20);
  auto g2 = generate_greedy(prompt, model.lm, 20);
  EXPECT_EQ(g1.ids, g2.ids);
  EXPECT_LE(g1.ids.size(), 20u);
  size_t eos_count = 0;
  for (size_t i = 0; i < g1.ids.size(); ++i) {
    if (g1.ids[i] == kEosId) {
      ++eos_count;
      EXPECT_EQ(i, g1.ids.size() - 1);  // EOS only as the final token
    }
  }
  EXPECT_LE(eos_count, 1u);
  EXPECT_THROW(generate_greedy(prompt, model.lm, 0), ValueError);
}

// Loss stays within [0, ln V + margin] for softmax-head logits and the
// gradient is exact against finite differences through the whole LM stack.
TEST(CaptionLoss, FullLmGradCheck) {
  LmConfig cfg;
  cfg.d_model = 16;
  cfg.blocks = 1;
  cfg.heads = 2;
  cfg.d_ff = 32;
  cfg.context = 16;
  auto lm = TinyCausalLM<double>::seeded(cfg, RngState(19));

  Tensor<double> soft = random_embeds<double>(3, 16, 21);
  soft.set_requires_grad(true);
  TokenSequence text = caption_sequence("hi");

  auto f = [&] {
    SoftPromptSegment<double> seg{soft, Modality::kVideo};
    auto prompt = build_soft_prompt<double>(seg, std::nullopt, text, lm);
    auto logits = lm.forward(prompt.embeds);
    return caption_loss(logits, prompt.tokens);
  };
  const double loss = f().item();
  EXPECT_GE(loss, 0.0);
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_LE(grad_check<double>(f, soft, 1e-5), 1e-6);
}
