#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "avqf/checkpoint.hpp"
#include "avqf/dataset.hpp"
#include "avqf/model.hpp"

namespace avqf {

// ---------------------------------------------------------------------------
// Optimizer: decoupled weight decay + adaptive moments, global-norm clipping
// ---------------------------------------------------------------------------

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  bool cosine_decay = true;
};

template <typename Real>
class AdamW {
 public:
  AdamW(NamedTensors<Real> params, const OptimConfig& cfg)
      : params_(std::move(params)), cfg_(cfg) {
    for (auto& [name, t] : params_) {
      if (!t.requires_grad()) {
        throw Error("AdamW: frozen tensor '" + name + "' in optimizer set");
      }
      m_.emplace_back(t.numel(), 0.0);
      v_.emplace_back(t.numel(), 0.0);
    }
  }

  const NamedTensors<Real>& params() const { return params_; }

  void zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  // One update with the given step-size; moments and decay math run in
  // double, written back as Real.
  void step(double lr_t) {
    ++t_;
    double norm2 = 0.0;
    for (auto& [name, t] : params_) {
      if (!t.has_grad()) continue;
      for (Real g : t.grad()) norm2 += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(norm2);
    const double clip_scale =
        (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;

    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<Real>& p = params_[i].second;
      if (!p.has_grad()) continue;
      auto& grad = p.grad();
      for (size_t j = 0; j < grad.size(); ++j) {
        const double g = static_cast<double>(grad[j]) * clip_scale;
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        const double update =
            mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * static_cast<double>(p.data()[j]);
        p.data()[j] = static_cast<Real>(static_cast<double>(p.data()[j]) - lr_t * update);
      }
    }
  }

 private:
  NamedTensors<Real> params_;
  OptimConfig cfg_;
  uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

inline double cosine_lr(const OptimConfig& cfg, size_t step, size_t total_steps) {
  if (!cfg.cosine_decay || total_steps == 0) return cfg.lr;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return cfg.lr * 0.5 * (1.0 + std::cos(M_PI * frac));
}

// ---------------------------------------------------------------------------
// Train configuration
// ---------------------------------------------------------------------------

enum class TrainStage { kPretrain, kFinetune };

inline std::string to_string(TrainStage s) {
  return s == TrainStage::kPretrain ? "pretrain" : "finetune";
}

struct TrainConfig {
  TrainBranch branch = TrainBranch::kVision;
  TrainStage stage = TrainStage::kPretrain;
  OptimConfig optim;
  size_t steps = 200;
  size_t batch_size = 4;
  uint64_t seed = 7;
  std::string manifest_path;
  std::string out_checkpoint;    // "" = do not write
  std::string base_checkpoint;   // stage-2 resume point
  std::string log_path;          // "" = no log file
  std::string mel_cache_path;    // optional preprocessed spectrograms
  std::string embeddings_path;   // optional precomputed encoder features
  std::string fixture_dir;       // "" = in-memory fixture cache only
  size_t fixture_steps = 900;    // LM fixture pretraining length
  size_t log_every = 50;
  ModelConfig model;

  void validate() const {
    if (steps < 1) throw ConfigError("TrainConfig: steps must be >= 1");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (!(optim.lr > 0)) throw ConfigError("TrainConfig: lr must be positive");
    model.validate();
  }
};

// ---------------------------------------------------------------------------
// Frozen LM fixture
// ---------------------------------------------------------------------------

// The LM ships pretrained on the closed caption grammar (captions plus
// template-wrapped Q/A lines) so soft prompts steer a model that already
// knows the language. A fixed seed keeps the fixture independent of any
// particular training run.
constexpr uint64_t kLmFixtureSeed = 0xf1a7c0deULL;

inline std::vector<std::string> lm_fixture_corpus() {
  std::vector<std::string> lines;
  std::vector<SyntheticScene> scenes;
  for (SceneShape sh : {SceneShape::kSquare, SceneShape::kCircle}) {
    for (SceneColor c : {SceneColor::kRed, SceneColor::kGreen, SceneColor::kBlue}) {
      for (SceneMotion m : {SceneMotion::kLeft, SceneMotion::kRight, SceneMotion::kUp,
                            SceneMotion::kDown, SceneMotion::kStatic}) {
        SyntheticScene s;
        s.shape = sh;
        s.color = c;
        s.motion = m;
        scenes.push_back(s);
      }
    }
  }
  for (ToneContour c : {ToneContour::kRising, ToneContour::kFalling, ToneContour::kFlat}) {
    SyntheticScene s;
    s.is_audio = true;
    s.contour = c;
    scenes.push_back(s);
  }
  for (const auto& s : scenes) {
    lines.push_back(caption_of(s));
    const size_t variants = s.is_audio ? 2 : 3;
    for (size_t v = 0; v < variants; ++v) {
      auto [q, a] = instruction_of(s, v);
      lines.push_back(std::string(kUserPrefix) + q + kAssistantPrefix + a);
    }
  }
  return lines;
}

// Trains the given LM in place on the fixture corpus, then freezes it.
template <typename Real>
void pretrain_lm_fixture(TinyCausalLM<Real>& lm, size_t steps = 900, double lr = 3e-3,
                         std::ostream* echo = nullptr) {
  const std::vector<std::string> corpus = lm_fixture_corpus();
  std::vector<TokenSequence> seqs;
  seqs.reserve(corpus.size());
  for (const auto& line : corpus) seqs.push_back(caption_sequence(line));

  lm.set_trainable(true);
  NamedTensors<Real> params;
  lm.collect("lm", params);
  OptimConfig oc;
  oc.lr = lr;
  oc.weight_decay = 0.0;
  AdamW<Real> opt(params, oc);

  const size_t batch = 8;
  size_t step = 0;
  uint64_t epoch = 0;
  while (step < steps) {
    std::vector<size_t> order(seqs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    RngState rng = RngState(kLmFixtureSeed).fork("lm-epoch-" + std::to_string(epoch));
    rng.shuffle(order);
    for (size_t off = 0; off < order.size() && step < steps; off += batch) {
      const size_t end = std::min(off + batch, order.size());
      opt.zero_grads();
      Tensor<Real> total = Tensor<Real>::scalar(Real(0));
      for (size_t i = off; i < end; ++i) {
        const TokenSequence& seq = seqs[order[i]];
        total = add(total, caption_loss(lm.forward(lm.embed(seq.ids)), seq));
      }
      Tensor<Real> loss = scale(total, Real(1) / static_cast<Real>(end - off));
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw DivergenceError("lm fixture: non-finite loss at step " + std::to_string(step));
      }
      backward(loss);
      opt.step(cosine_lr(oc, step, steps));
      if (echo && (step % 100 == 0 || step + 1 == steps)) {
        *echo << "lm_fixture step=" << step << " loss=" << value << "\n";
      }
      ++step;
    }
    ++epoch;
  }
  lm.set_trainable(false);
}

// Fixture bundle for a given LM configuration, cached in memory and
// optionally on disk. Always built in f32 so the fixture bytes do not
// depend on the caller's scalar type.
inline CheckpointBundle& lm_fixture_bundle(const LmConfig& cfg, const std::string& cache_dir,
                                           size_t steps = 900) {
  static std::map<std::string, CheckpointBundle> memo;
  const std::string key = nlohmann::json(cfg).dump() + ":" + std::to_string(steps);
  auto it = memo.find(key);
  if (it != memo.end()) return it->second;

  const uint64_t hash = fnv1a64(key);
  std::string file;
  if (!cache_dir.empty()) {
    std::filesystem::create_directories(cache_dir);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
    file = (std::filesystem::path(cache_dir) / ("lm_fixture_" + std::string(buf) + ".avqf"))
               .string();
    if (std::filesystem::exists(file)) {
      return memo.emplace(key, load_checkpoint(file)).first->second;
    }
  }

  TinyCausalLM<float> lm = TinyCausalLM<float>::seeded(cfg, RngState(kLmFixtureSeed));
  pretrain_lm_fixture(lm, steps);
  NamedTensors<float> params;
  lm.collect("lm", params);
  TrainMeta meta;
  meta.stage = "fixture";
  meta.seed = kLmFixtureSeed;
  meta.config = nlohmann::json(cfg);
  meta.config_hash = hash;
  CheckpointBundle bundle = bundle_from_params(params, meta);
  if (!file.empty()) save_checkpoint(file, bundle);
  return memo.emplace(key, std::move(bundle)).first->second;
}

template <typename Real>
void install_lm_fixture(Model<Real>& model, const std::string& cache_dir, size_t steps = 900) {
  const CheckpointBundle& bundle = lm_fixture_bundle(model.cfg.lm, cache_dir, steps);
  NamedTensors<Real> lm_params;
  model.lm.collect("lm", lm_params);
  apply_to_params(bundle, lm_params);
}

// ---------------------------------------------------------------------------
// Media -> features, with frozen-encoder memoization and import hooks
// ---------------------------------------------------------------------------

template <typename Real>
class FeatureStore {
 public:
  FeatureStore(const Model<Real>& model, const TrainConfig& cfg) : model_(model), cfg_(cfg) {
    if (!cfg.mel_cache_path.empty()) {
      mel_cache_ = load_checkpoint(cfg.mel_cache_path);
    }
    if (!cfg.embeddings_path.empty()) {
      embeddings_ = load_checkpoint(cfg.embeddings_path);
    }
  }

  // Branch input for a record: [N, K_f, d_f] on the vision side, [M, d_pre]
  // on the audio side (visual records cross the frozen adapter there).
  Tensor<Real> features(const ManifestRecord& r, TrainBranch branch) {
    const std::string key = to_string(branch) + ":" + r.id + ":" + r.media_path;
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    Tensor<Real> out;
    if (branch == TrainBranch::kVision) {
      if (r.modality == Modality::kAudio) {
        throw DatasetError("vision branch cannot consume audio media (record '" + r.id + "')");
      }
      out = video_embedding(r).v;
    } else {
      if (r.modality == Modality::kAudio) {
        out = audio_embedding(r).a;
      } else {
        out = model_.audio_encoder.visual_to_segments(video_embedding(r)).a;
      }
    }
    cache_.emplace(key, out);
    return out;
  }

  VideoEmbedding<Real> video_embedding(const ManifestRecord& r) {
    if (embeddings_) {
      if (const CheckpointEntry* e = embeddings_->find("video_embed/" + r.id)) {
        return imported_video(*e, r.id);
      }
    }
    const std::string path = resolve_media_path(cfg_.manifest_path, r);
    VideoFile vf = load_avvf(path);
    auto frames = frames_from_video<Real>(vf);
    if (r.modality == Modality::kImage) {
      if (vf.n_frames != 1) {
        throw SchemaError("record '" + r.id + "' is an image but has " +
                          std::to_string(vf.n_frames) + " frames");
      }
      frames = image_as_video(frames[0]);
    }
    return model_.image_encoder.encode_video(frames);
  }

  AudioSegmentEmbeddings<Real> audio_embedding(const ManifestRecord& r) {
    if (embeddings_) {
      if (const CheckpointEntry* e = embeddings_->find("audio_embed/" + r.id)) {
        AudioSegmentEmbeddings<Real> out;
        if (e->shape.size() != 2) throw SchemaError("audio_embed/" + r.id + ": expected rank-2");
        out.a = entry_tensor(*e);
        out.n_segments = e->shape[0];
        return out;
      }
    }
    std::vector<SpectrogramClip<Real>> clips;
    if (mel_cache_) {
      if (const CheckpointEntry* e = mel_cache_->find("mel/" + r.id)) {
        if (e->shape.size() != 3) throw SchemaError("mel/" + r.id + ": expected rank-3");
        for (size_t m = 0; m < e->shape[0]; ++m) {
          SpectrogramClip<Real> clip;
          const size_t cells = e->shape[1] * e->shape[2];
          std::vector<Real> d(cells);
          for (size_t i = 0; i < cells; ++i) d[i] = static_cast<Real>(e->f32[m * cells + i]);
          clip.mel = Tensor<Real>::from_data({e->shape[1], e->shape[2]}, std::move(d));
          clip.segment_duration = cfg_.model.audio.seg_seconds;
          clips.push_back(std::move(clip));
        }
        return model_.audio_encoder.encode_segments(clips);
      }
    }
    const std::string path = resolve_media_path(cfg_.manifest_path, r);
    Waveform w = load_wav(path);
    clips = audio_to_clips<Real>(w, cfg_.model.audio);
    return model_.audio_encoder.encode_segments(clips);
  }

 private:
  Tensor<Real> entry_tensor(const CheckpointEntry& e) const {
    std::vector<Real> d(e.f32.size());
    for (size_t i = 0; i < d.size(); ++i) d[i] = static_cast<Real>(e.f32[i]);
    return Tensor<Real>::from_data(e.shape, std::move(d));
  }

  VideoEmbedding<Real> imported_video(const CheckpointEntry& e, const std::string& id) const {
    if (e.shape.size() != 3) throw SchemaError("video_embed/" + id + ": expected rank-3");
    VideoEmbedding<Real> out;
    out.v = entry_tensor(e);
    out.n_frames = e.shape[0];
    return out;
  }

  const Model<Real>& model_;
  const TrainConfig& cfg_;
  std::map<std::string, Tensor<Real>> cache_;
  std::optional<CheckpointBundle> mel_cache_;
  std::optional<CheckpointBundle> embeddings_;
};

// ---------------------------------------------------------------------------
// Training steps and stages
// ---------------------------------------------------------------------------

template <typename Real>
TokenSequence record_text(const ManifestRecord& r) {
  if (r.kind == RecordKind::kCaption) return caption_sequence(r.caption);
  return instruction_sequence(r.instruction, r.response);
}

// Forward one record through encoders -> active branch -> soft prompt ->
// frozen LM -> masked cross entropy.
template <typename Real>
Tensor<Real> record_loss(const Model<Real>& model, FeatureStore<Real>& store,
                         const ManifestRecord& r, TrainBranch branch) {
  Tensor<Real> feats = store.features(r, branch);
  SoftPrompt<Real> prompt;
  TokenSequence text = record_text<Real>(r);
  if (branch == TrainBranch::kVision) {
    auto seg = model.video_branch.forward(feats);
    prompt = build_soft_prompt<Real>(seg, std::nullopt, text, model.lm);
  } else {
    auto seg = model.audio_branch.forward(feats);
    prompt = build_soft_prompt<Real>(std::nullopt, seg, text, model.lm);
  }
  return caption_loss(model.lm.forward(prompt.embeds), prompt.tokens);
}

// One optimization transaction: forward the batch, zero, backward, clipped
// adaptive update on the active branch only. The frozen/trainable partition
// is asserted before the update is applied.
template <typename Real>
double training_step(Model<Real>& model, FeatureStore<Real>& store,
                     const std::vector<ManifestRecord>& records,
                     const std::vector<size_t>& batch, TrainBranch branch, AdamW<Real>& opt,
                     double lr_t, size_t step_index) {
  if (batch.empty()) throw ValueError("training_step: empty batch");
  Tensor<Real> total = Tensor<Real>::scalar(Real(0));
  for (size_t i : batch) {
    total = add(total, record_loss(model, store, records[i], branch));
  }
  Tensor<Real> loss = scale(total, Real(1) / static_cast<Real>(batch.size()));
  const double value = static_cast<double>(loss.item());
  if (!std::isfinite(value)) {
    throw DivergenceError("training diverged: loss=" + std::to_string(value) + " at step " +
                          std::to_string(step_index));
  }
  opt.zero_grads();
  backward(loss);
  for (const auto& [name, t] : model.frozen_params()) {
    if (t.has_grad()) {
      throw Error("freeze violation: gradient reached frozen tensor '" + name + "'");
    }
  }
  opt.step(lr_t);
  return value;
}

struct TrainReport {
  std::vector<double> losses;
  double initial_running = 0.0;
  double final_running = 0.0;
};

inline void finish_report(TrainReport& r) {
  if (r.losses.empty()) return;
  const size_t w = std::min<size_t>(20, r.losses.size());
  double a = 0, b = 0;
  for (size_t i = 0; i < w; ++i) {
    a += r.losses[i];
    b += r.losses[r.losses.size() - 1 - i];
  }
  r.initial_running = a / static_cast<double>(w);
  r.final_running = b / static_cast<double>(w);
}

template <typename Real>
struct StageResult {
  CheckpointBundle bundle;
  TrainReport report;
};

namespace train_detail {

template <typename Real>
StageResult<Real> run_stage(const TrainConfig& cfg, Model<Real>& model,
                            const std::vector<ManifestRecord>& records, std::ostream* echo) {
  FeatureStore<Real> store(model, cfg);
  AdamW<Real> opt(model.trainable_params(cfg.branch), cfg.optim);

  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path, std::ios::app);
    if (!log) throw IoError("cannot open log file " + cfg.log_path);
  }

  TrainReport report;
  size_t step = 0;
  uint64_t epoch = 0;
  while (step < cfg.steps) {
    auto batches = batch_iter(records, cfg.batch_size, cfg.seed, epoch);
    for (const auto& batch : batches) {
      if (step >= cfg.steps) break;
      const double lr_t = cosine_lr(cfg.optim, step, cfg.steps);
      const double loss = training_step(model, store, records, batch, cfg.branch, opt, lr_t, step);
      report.losses.push_back(loss);
      if (log) {
        log << "step=" << step << " loss=" << loss << " lr=" << lr_t << "\n";
      }
      if (echo && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
        *echo << "step=" << step << " loss=" << loss << " lr=" << lr_t << "\n";
      }
      ++step;
    }
    ++epoch;
  }
  finish_report(report);

  TrainMeta meta;
  meta.step = cfg.steps;
  meta.stage = to_string(cfg.stage);
  meta.branch = to_string(cfg.branch);
  meta.seed = cfg.seed;
  meta.config = nlohmann::json(cfg.model);
  meta.config_hash = config_hash(cfg.model);
  StageResult<Real> result;
  result.bundle = bundle_from_params(model.named_params(), meta);
  result.report = std::move(report);
  if (!cfg.out_checkpoint.empty()) save_checkpoint(cfg.out_checkpoint, result.bundle);
  return result;
}

}  // namespace train_detail

// Stage 1: caption pretraining. branch=vision consumes video/image caption
// pairs; branch=audio runs the same visual caption data through the
// audio-side path (or true audio captions when the manifest has them).
template <typename Real>
StageResult<Real> pretrain_stage(const TrainConfig& cfg, std::ostream* echo = nullptr) {
  TrainConfig c = cfg;
  c.stage = TrainStage::kPretrain;
  c.validate();
  auto records = load_manifest(c.manifest_path);
  if (records.empty()) throw DatasetError("pretrain_stage: empty manifest " + c.manifest_path);
  for (const auto& r : records) {
    if (r.kind != RecordKind::kCaption) {
      throw DatasetError("pretrain_stage: record '" + r.id + "' is not caption-kind");
    }
  }
  Model<Real> model = Model<Real>::seeded(c.model, c.seed);
  install_lm_fixture(model, c.fixture_dir, c.fixture_steps);
  return train_detail::run_stage(c, model, records, echo);
}

// Stage 2: instruction fine-tuning from a stage-1 checkpoint. The template
// is "USER: <instruction>\nASSISTANT: <response>" behind the media soft
// prompt, with loss on response tokens only.
template <typename Real>
StageResult<Real> finetune_stage(const TrainConfig& cfg, std::ostream* echo = nullptr) {
  TrainConfig c = cfg;
  c.stage = TrainStage::kFinetune;
  c.validate();
  if (c.base_checkpoint.empty()) {
    throw ConfigError("finetune_stage: base checkpoint is required");
  }
  CheckpointBundle base = load_checkpoint(c.base_checkpoint);
  const TrainMeta base_meta = base.meta();
  if (base_meta.config_hash != config_hash(c.model)) {
    throw ConfigError("finetune_stage: base checkpoint was trained with a different config");
  }
  auto records = load_manifest(c.manifest_path);
  if (records.empty()) throw DatasetError("finetune_stage: empty manifest " + c.manifest_path);
  for (const auto& r : records) {
    if (r.kind != RecordKind::kInstruction) {
      throw DatasetError("finetune_stage: record '" + r.id + "' is not instruction-kind");
    }
  }
  Model<Real> model = Model<Real>::seeded(c.model, c.seed);
  NamedTensors<Real> params = model.named_params();
  apply_to_params(base, params);
  return train_detail::run_stage(c, model, records, echo);
}

}  // namespace avqf
