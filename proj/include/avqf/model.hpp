#pragma once

#include <string>
#include <vector>

#include "avqf/config.hpp"
#include "avqf/encoders.hpp"
#include "avqf/lm.hpp"
#include "avqf/qformer.hpp"

namespace avqf {

enum class TrainBranch { kVision, kAudio };

inline std::string to_string(TrainBranch b) {
  return b == TrainBranch::kVision ? "vision" : "audio";
}

inline TrainBranch branch_from_string(const std::string& s) {
  if (s == "vision") return TrainBranch::kVision;
  if (s == "audio") return TrainBranch::kAudio;
  throw ConfigError("unknown branch '" + s + "' (expected vision or audio)");
}

// The whole fusion stack: frozen media encoders, two trainable Q-Former
// branches, and the frozen LM. Construction is a pure function of
// (config, seed); each component draws from its own named stream.
template <typename Real>
struct Model {
  ModelConfig cfg;
  ImageEncoder<Real> image_encoder;
  AudioEncoder<Real> audio_encoder;
  Branch<Real> video_branch;
  Branch<Real> audio_branch;
  TinyCausalLM<Real> lm;

  static Model seeded(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    RngState root(seed);
    Model m;
    m.cfg = cfg;
    m.image_encoder = ImageEncoder<Real>::seeded(cfg.image, root.fork("image_encoder"));
    m.audio_encoder =
        AudioEncoder<Real>::seeded(cfg.audio_enc, cfg.audio, cfg.image.d_f,
                                   root.fork("audio_encoder"));
    m.video_branch = Branch<Real>::seeded(Modality::kVideo, cfg.video_qf, cfg.image.d_f,
                                          cfg.lm.d_model, root.fork("video_branch"));
    m.audio_branch = Branch<Real>::seeded(Modality::kAudio, cfg.audio_qf, cfg.audio_enc.d_pre,
                                          cfg.lm.d_model, root.fork("audio_branch"));
    m.lm = TinyCausalLM<Real>::seeded(cfg.lm, root.fork("lm"));
    return m;
  }

  NamedTensors<Real> named_params() const {
    NamedTensors<Real> out;
    image_encoder.collect("image_encoder", out);
    audio_encoder.collect("audio_encoder", out);
    video_branch.collect("video_pos", "video_qformer", "video_proj", out);
    audio_branch.collect("audio_pos", "audio_qformer", "audio_proj", out);
    lm.collect("lm", out);
    return out;
  }

  // Trainable set for a stage: exactly the active branch's position table,
  // Q-Former (query tokens included), and projection.
  NamedTensors<Real> trainable_params(TrainBranch branch) const {
    NamedTensors<Real> out;
    if (branch == TrainBranch::kVision) {
      video_branch.collect("video_pos", "video_qformer", "video_proj", out);
    } else {
      audio_branch.collect("audio_pos", "audio_qformer", "audio_proj", out);
    }
    return out;
  }

  NamedTensors<Real> frozen_params() const {
    NamedTensors<Real> out;
    image_encoder.collect("image_encoder", out);
    audio_encoder.collect("audio_encoder", out);
    lm.collect("lm", out);
    return out;
  }

};

}  // namespace avqf
