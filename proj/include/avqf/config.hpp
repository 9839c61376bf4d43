#pragma once

#include <string>

#include <json.hpp>

#include "avqf/audio.hpp"
#include "avqf/error.hpp"
#include "avqf/rng.hpp"

namespace avqf {

struct ImageEncoderConfig {
  int height = 32;
  int width = 32;
  int channels = 3;
  int patch = 8;
  int d_f = 64;  // width of each frame embedding vector
  int k_f = 8;   // vectors emitted per frame
  int layers = 2;
  int heads = 4;
  int d_ff = 128;

  int num_patches() const { return (height / patch) * (width / patch); }
  int patch_dim() const { return patch * patch * channels; }
};

struct AudioEncoderConfig {
  int d_pre = 64;  // dense vector width per spectrogram clip
  int hidden = 64;
};

struct QFormerConfig {
  int num_queries = 32;
  int d_model = 64;
  int num_layers = 2;
  int num_heads = 4;
  int d_ff = 256;
  int max_positions = 32;
};

struct LmConfig {
  int vocab = 259;  // 256 bytes + BOS/EOS/PAD
  int d_model = 128;
  int blocks = 2;
  int heads = 4;
  int d_ff = 256;
  int context = 256;
};

struct ModelConfig {
  ImageEncoderConfig image;
  AudioEncoderConfig audio_enc;
  AudioFrontendConfig audio;
  QFormerConfig video_qf;
  QFormerConfig audio_qf;
  LmConfig lm;

  void validate() const {
    if (image.height % image.patch != 0 || image.width % image.patch != 0) {
      throw ConfigError("ModelConfig: frame extents must be divisible by patch size");
    }
    if (image.channels != 3) throw ConfigError("ModelConfig: channels must be 3");
    if (image.d_f % image.heads != 0) {
      throw ConfigError("ModelConfig: image d_f must be divisible by heads");
    }
    for (const QFormerConfig* q : {&video_qf, &audio_qf}) {
      if (q->num_queries < 1) throw ConfigError("ModelConfig: num_queries must be >= 1");
      if (q->d_model % q->num_heads != 0) {
        throw ConfigError("ModelConfig: q-former d_model must be divisible by heads");
      }
      if (q->max_positions < 1) throw ConfigError("ModelConfig: max_positions must be >= 1");
    }
    if (lm.d_model % lm.heads != 0) {
      throw ConfigError("ModelConfig: lm d_model must be divisible by heads");
    }
    if (lm.vocab < 259) throw ConfigError("ModelConfig: vocab must cover bytes + specials");
  }
};

inline ModelConfig default_config() { return ModelConfig{}; }

// Small enough for finite-difference checks over every trainable parameter
// and for CPU overfit runs, while keeping the full architecture.
inline ModelConfig toy_config() {
  ModelConfig c;
  c.image.patch = 16;
  c.image.d_f = 32;
  c.image.k_f = 4;
  c.image.layers = 1;
  c.image.heads = 2;
  c.image.d_ff = 64;
  c.audio_enc.d_pre = 32;
  c.audio_enc.hidden = 32;
  c.audio.mel.n_mels = 32;
  c.audio.mel.hop = 256;
  for (QFormerConfig* q : {&c.video_qf, &c.audio_qf}) {
    q->num_queries = 8;
    q->d_model = 32;
    q->num_layers = 1;
    q->num_heads = 4;
    q->d_ff = 64;
    q->max_positions = 32;
  }
  c.lm.d_model = 64;
  c.lm.blocks = 2;
  c.lm.heads = 4;
  c.lm.d_ff = 128;
  c.lm.context = 256;
  return c;
}

// ---------------------------------------------------------------------------
// JSON round trip (checkpoint metadata and CLI config files)
// ---------------------------------------------------------------------------

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(MelConfig, n_mels, n_fft, hop, log_floor)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(AudioFrontendConfig, sample_rate, seg_seconds, n_segments, mel)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ImageEncoderConfig, height, width, channels, patch, d_f, k_f,
                                   layers, heads, d_ff)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(AudioEncoderConfig, d_pre, hidden)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(QFormerConfig, num_queries, d_model, num_layers, num_heads,
                                   d_ff, max_positions)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(LmConfig, vocab, d_model, blocks, heads, d_ff, context)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelConfig, image, audio_enc, audio, video_qf, audio_qf, lm)

inline ModelConfig preset_config(const std::string& name) {
  if (name == "default") return default_config();
  if (name == "toy") return toy_config();
  throw ConfigError("unknown preset '" + name + "' (expected default or toy)");
}

inline uint64_t config_hash(const ModelConfig& cfg) {
  return fnv1a64(nlohmann::json(cfg).dump());
}

}  // namespace avqf
