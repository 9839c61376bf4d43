#pragma once

#include <deque>
#include <istream>
#include <optional>
#include <ostream>
#include <string>

#include "avqf/model.hpp"
#include "avqf/train.hpp"

namespace avqf {

// Encoder features for ad-hoc media files (outside any manifest).
template <typename Real>
struct MediaInput {
  std::optional<Tensor<Real>> video_feats;  // [N, K_f, d_f]
  std::optional<Tensor<Real>> audio_feats;  // [M, d_pre]
};

template <typename Real>
MediaInput<Real> load_media_features(const Model<Real>& model, const std::string& video_path,
                                     const std::string& audio_path) {
  MediaInput<Real> media;
  if (!video_path.empty()) {
    VideoFile vf = load_avvf(video_path);
    media.video_feats = model.image_encoder.encode_video(frames_from_video<Real>(vf)).v;
  }
  if (!audio_path.empty()) {
    Waveform w = load_wav(audio_path);
    auto clips = audio_to_clips<Real>(w, model.cfg.audio);
    media.audio_feats = model.audio_encoder.encode_segments(clips).a;
  }
  return media;
}

template <typename Real>
SoftPrompt<Real> assemble_prompt(const Model<Real>& model, const MediaInput<Real>& media,
                                 const TokenSequence& text) {
  std::optional<SoftPromptSegment<Real>> vseg, aseg;
  if (media.video_feats) vseg = model.video_branch.forward(*media.video_feats);
  if (media.audio_feats) aseg = model.audio_branch.forward(*media.audio_feats);
  return build_soft_prompt<Real>(vseg, aseg, text, model.lm);
}

// Greedy reply for a prompt-only sequence; returns decoded text.
template <typename Real>
std::string generate_reply(const Model<Real>& model, const MediaInput<Real>& media,
                           const TokenSequence& text, size_t max_len) {
  auto prompt = assemble_prompt(model, media, text);
  auto gen = generate_greedy(prompt, model.lm, max_len);
  return string_of(gen.ids);
}

// Caption mode: decode straight after [BOS] behind the media soft prompt.
template <typename Real>
std::string generate_caption(const Model<Real>& model, const MediaInput<Real>& media,
                             size_t max_len) {
  TokenSequence bos;
  bos.ids = {kBosId};
  bos.loss_mask = {0};
  return generate_reply(model, media, bos, max_len);
}

// Instruction mode: wrap one instruction in the chat template.
template <typename Real>
std::string generate_answer(const Model<Real>& model, const MediaInput<Real>& media,
                            const std::string& instruction, size_t max_len) {
  return generate_reply(
      model, media,
      prompt_sequence(std::string(kUserPrefix) + instruction + kAssistantPrefix), max_len);
}

// Rebuilds a model from a checkpoint: same config and seed, then weights.
template <typename Real>
Model<Real> model_from_checkpoint(const CheckpointBundle& bundle) {
  const TrainMeta meta = bundle.meta();
  ModelConfig cfg = meta.config.get<ModelConfig>();
  Model<Real> model = Model<Real>::seeded(cfg, meta.seed);
  NamedTensors<Real> params = model.named_params();
  apply_to_params(bundle, params);
  return model;
}

// Interactive loop: each line becomes one template-wrapped turn behind the
// media soft prompt; turns accumulate until the context fills, then the
// oldest turns fall off. "/quit" ends the session.
template <typename Real>
void chat_repl(const Model<Real>& model, const MediaInput<Real>& media, std::istream& in,
               std::ostream& out, size_t max_len = 64) {
  std::deque<std::string> turns;
  std::string line;
  out << "chat ready; /quit to exit\n";
  while (true) {
    out << "> " << std::flush;
    if (!std::getline(in, line)) break;
    if (line == "/quit") break;
    if (line.empty()) continue;

    size_t prefix = 0;
    if (media.video_feats) prefix += model.video_branch.qformer.cfg.num_queries;
    if (media.audio_feats) prefix += model.audio_branch.qformer.cfg.num_queries;

    const std::string turn = std::string(kUserPrefix) + line + kAssistantPrefix;
    auto assembled_len = [&](const std::deque<std::string>& history) {
      size_t n = 1;  // BOS
      for (const auto& t : history) n += t.size();
      return prefix + n + turn.size();
    };
    while (!turns.empty() &&
           assembled_len(turns) + max_len > static_cast<size_t>(model.cfg.lm.context)) {
      turns.pop_front();
    }

    std::string history;
    for (const auto& t : turns) history += t;
    TokenSequence text = prompt_sequence(history + turn);
    std::string reply;
    try {
      auto prompt = assemble_prompt(model, media, text);
      auto gen = generate_greedy(prompt, model.lm, max_len);
      reply = string_of(gen.ids);
    } catch (const Error& e) {
      out << "error: " << e.what() << "\n";
      continue;
    }
    out << reply << "\n";
    turns.push_back(turn + reply + "\n");
  }
}

}  // namespace avqf
