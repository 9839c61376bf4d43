#pragma once

#include <cstdio>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "avqf/generate.hpp"
#include "avqf/grad_check.hpp"
#include "avqf/train.hpp"

namespace avqf::cli {

inline std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// flags > config file > AVQF_SEED (seed only) > built-in defaults
class Overlay {
 public:
  explicit Overlay(nlohmann::json file) : file_(std::move(file)) {}

  template <typename T>
  void resolve(const CLI::Option* opt, const std::string& key, T& value) const {
    if (opt != nullptr && opt->count() > 0) return;
    if (file_.contains(key)) {
      try {
        value = file_.at(key).get<T>();
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file: bad value for '" + key + "': " + e.what());
      }
    }
  }

  void resolve_seed(const CLI::Option* opt, uint64_t& seed) const {
    if (opt != nullptr && opt->count() > 0) return;
    if (file_.contains("seed")) {
      seed = file_.at("seed").get<uint64_t>();
      return;
    }
    if (const char* env = std::getenv("AVQF_SEED")) {
      seed = std::strtoull(env, nullptr, 10);
    }
  }

 private:
  nlohmann::json file_;
};

inline nlohmann::json load_config_file(const std::vector<std::string>& args) {
  std::string path;
  for (size_t i = 0; i + 1 < args.size(); ++i) {
    if (args[i] == "--config") path = args[i + 1];
  }
  if (path.empty()) return nlohmann::json::object();
  if (!std::filesystem::exists(path)) throw IoError("config file not found: " + path);
  std::ifstream f(path);
  try {
    nlohmann::json j = nlohmann::json::parse(f);
    if (!j.is_object()) throw ConfigError("config file must hold a single JSON object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config file: ") + e.what());
  }
}

namespace detail {

// Deterministic in-memory media for gradcheck: one rendered frame and two
// tone segments, so the checked path covers encoders end to end.
template <typename Real>
std::pair<VideoFile, std::vector<SpectrogramClip<Real>>> gradcheck_media(
    const ModelConfig& mc) {
  SyntheticScene scene;
  scene.color = SceneColor::kRed;
  scene.shape = SceneShape::kSquare;
  scene.motion = SceneMotion::kStatic;
  scene.n_frames = 1;
  SynthOptions opt;
  opt.height = mc.image.height;
  opt.width = mc.image.width;
  VideoFile vf = render_scene(scene, opt);

  SyntheticScene tone;
  tone.is_audio = true;
  tone.contour = ToneContour::kRising;
  SynthOptions aopt;
  aopt.audio_seconds = 4.0;
  aopt.sample_rate = mc.audio.sample_rate;
  Waveform w = render_tone(tone, aopt);
  AudioFrontendConfig fe = mc.audio;
  fe.n_segments = 2;
  auto clips = audio_to_clips<Real>(w, fe);
  return {std::move(vf), std::move(clips)};
}

}  // namespace detail

// Full-pipeline gradient check in double: encoders -> branch -> soft prompt
// -> frozen LM -> caption loss, central differences over every trainable
// parameter of the branch. Returns the max relative error seen.
inline double run_gradcheck(const ModelConfig& mc, uint64_t seed, double h,
                            const std::string& branch_sel, std::ostream& out) {
  Model<double> model = Model<double>::seeded(mc, seed);
  auto [vf, clips] = detail::gradcheck_media<double>(mc);
  TokenSequence text = caption_sequence("red");

  double worst = 0.0;
  if (branch_sel == "vision" || branch_sel == "both") {
    std::vector<Tensor<double>> params;
    for (auto& [n, t] : model.trainable_params(TrainBranch::kVision)) params.push_back(t);
    auto f = [&] {
      auto v = model.image_encoder.encode_video(frames_from_video<double>(vf)).v;
      auto seg = model.video_branch.forward(v);
      auto prompt = build_soft_prompt<double>(seg, std::nullopt, text, model.lm);
      return caption_loss(model.lm.forward(prompt.embeds), prompt.tokens);
    };
    const double err = grad_check<double>(f, params, h);
    out << "gradcheck branch=vision max_rel_err=" << fmt6(err) << "\n";
    worst = std::max(worst, err);
  }
  if (branch_sel == "audio" || branch_sel == "both") {
    std::vector<Tensor<double>> params;
    for (auto& [n, t] : model.trainable_params(TrainBranch::kAudio)) params.push_back(t);
    auto f = [&] {
      auto a = model.audio_encoder.encode_segments(clips).a;
      auto seg = model.audio_branch.forward(a);
      auto prompt = build_soft_prompt<double>(std::nullopt, seg, text, model.lm);
      return caption_loss(model.lm.forward(prompt.embeds), prompt.tokens);
    };
    const double err = grad_check<double>(f, params, h);
    out << "gradcheck branch=audio max_rel_err=" << fmt6(err) << "\n";
    worst = std::max(worst, err);
  }
  out << "gradcheck max_rel_err=" << fmt6(worst) << "\n";
  return worst;
}

// Writes "mel/<id>" spectrogram stacks for the audio records of a manifest
// and validates every other media file by loading it.
inline void run_preprocess(const std::string& manifest_path, const std::string& out_path,
                           const ModelConfig& mc, std::ostream& out) {
  auto records = load_manifest(manifest_path);
  NamedTensors<float> entries;
  size_t audio_cached = 0, visual_checked = 0;
  for (const auto& r : records) {
    const std::string media = resolve_media_path(manifest_path, r);
    if (r.modality == Modality::kAudio) {
      Waveform w = load_wav(media);
      auto clips = audio_to_clips<float>(w, mc.audio);
      const size_t m = clips.size();
      const size_t rows = clips[0].mel.extent(0), cols = clips[0].mel.extent(1);
      Tensor<float> stack = Tensor<float>::zeros({m, rows, cols});
      for (size_t i = 0; i < m; ++i) {
        std::copy_n(clips[i].mel.data().data(), rows * cols,
                    stack.data().data() + i * rows * cols);
      }
      entries.emplace_back("mel/" + r.id, stack);
      ++audio_cached;
    } else {
      load_avvf(media);  // validation only
      ++visual_checked;
    }
  }
  TrainMeta meta;
  meta.stage = "preprocess";
  meta.config = nlohmann::json(mc);
  meta.config_hash = config_hash(mc);
  save_checkpoint(out_path, bundle_from_params(entries, meta));
  out << "preprocessed " << records.size() << " records (" << audio_cached
      << " audio cached, " << visual_checked << " visual validated) -> " << out_path << "\n";
}

inline int dispatch(std::vector<std::string> args, std::istream& in, std::ostream& out,
                    std::ostream& err) {
  CLI::App app{"desk-scale audio-visual q-former fusion over a frozen tiny LM"};
  app.name("avqformer");
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file (flags override it)")
      ->expected(1);

  // shared settings
  uint64_t seed = 7;
  std::string preset = "default";

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "rng seed (AVQF_SEED overrides the default)");
    sub->add_option("--preset", preset, "model preset")
        ->check(CLI::IsMember({"default", "toy"}));
    sub->add_option("--config", config_path, "JSON config file (flags override it)");
  };

  // synth
  auto* synth = app.add_subcommand("synth", "generate synthetic media + manifest");
  size_t synth_n = 8;
  std::string synth_kind = "video", synth_out = "data", synth_task = "caption";
  int synth_frames = 8;
  double synth_audio_seconds = 8.0;
  add_common(synth);
  synth->add_option("--n", synth_n, "number of examples");
  synth->add_option("--kind", synth_kind, "media kind")
      ->check(CLI::IsMember({"video", "image", "audio"}));
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--task", synth_task, "record kind")
      ->check(CLI::IsMember({"caption", "instruction"}));
  synth->add_option("--frames", synth_frames, "frames per video");
  synth->add_option("--audio-seconds", synth_audio_seconds, "tone duration");

  // preprocess
  auto* preprocess = app.add_subcommand("preprocess", "cache spectrograms, validate media");
  std::string pp_manifest, pp_out = "cache.avqf";
  add_common(preprocess);
  preprocess->add_option("--manifest", pp_manifest, "input manifest")->required();
  preprocess->add_option("--out", pp_out, "output cache container");

  // pretrain / finetune share most options
  std::string tr_branch = "vision", tr_manifest, tr_out, tr_log, tr_base;
  std::string tr_mel_cache, tr_embeddings, tr_fixture_dir = "fixtures";
  size_t tr_steps = 200, tr_batch = 4, tr_fixture_steps = 900, tr_log_every = 50;
  double tr_lr = 1e-3, tr_wd = 0.01;
  auto add_train_options = [&](CLI::App* sub) {
    add_common(sub);
    sub->add_option("--branch", tr_branch, "which branch trains")
        ->check(CLI::IsMember({"vision", "audio"}));
    sub->add_option("--manifest", tr_manifest, "training manifest")->required();
    sub->add_option("--steps", tr_steps, "optimization steps");
    sub->add_option("--batch-size", tr_batch, "records per step");
    sub->add_option("--lr", tr_lr, "peak learning rate");
    sub->add_option("--weight-decay", tr_wd, "decoupled weight decay");
    sub->add_option("--out", tr_out, "checkpoint output path");
    sub->add_option("--log", tr_log, "append-only training log file");
    sub->add_option("--log-every", tr_log_every, "echo cadence");
    sub->add_option("--mel-cache", tr_mel_cache, "preprocessed spectrogram container");
    sub->add_option("--embeddings", tr_embeddings, "precomputed encoder features container");
    sub->add_option("--fixture-dir", tr_fixture_dir, "LM fixture cache directory");
    sub->add_option("--fixture-steps", tr_fixture_steps, "LM fixture pretraining steps");
  };
  auto* pretrain = app.add_subcommand("pretrain", "stage 1: caption pretraining");
  add_train_options(pretrain);
  auto* finetune = app.add_subcommand("finetune", "stage 2: instruction tuning");
  add_train_options(finetune);
  finetune->add_option("--base", tr_base, "stage-1 checkpoint to resume from")->required();

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the full path");
  std::string gc_branch = "both";
  double gc_h = 1e-5;
  gradcheck->set_help_flag("--help", "print help");  // frees -h for the step size
  add_common(gradcheck);
  gradcheck->add_option("--branch", gc_branch, "branch to check")
      ->check(CLI::IsMember({"vision", "audio", "both"}));
  gradcheck->add_option("--h", gc_h, "central-difference step");

  // generate
  auto* generate = app.add_subcommand("generate", "one-shot greedy decoding");
  std::string gen_checkpoint, gen_media, gen_audio_media, gen_instruction;
  size_t gen_max_len = 64;
  add_common(generate);
  generate->add_option("--checkpoint", gen_checkpoint, "trained checkpoint")->required();
  generate->add_option("--media", gen_media, "AVVF video/image file");
  generate->add_option("--audio-media", gen_audio_media, "WAV audio file");
  generate->add_option("--instruction", gen_instruction,
                       "wrap in the chat template (caption mode when absent)");
  generate->add_option("--max-len", gen_max_len, "generation budget");

  // chat
  auto* chat = app.add_subcommand("chat", "interactive REPL");
  std::string chat_checkpoint, chat_media, chat_audio_media;
  size_t chat_max_len = 64;
  add_common(chat);
  chat->add_option("--checkpoint", chat_checkpoint, "trained checkpoint")->required();
  chat->add_option("--media", chat_media, "AVVF video/image file");
  chat->add_option("--audio-media", chat_audio_media, "WAV audio file");
  chat->add_option("--max-len", chat_max_len, "per-turn generation budget");

  try {
    Overlay overlay(load_config_file(args));
    {
      std::vector<std::string> reversed(args.rbegin(), args.rend());
      app.parse(reversed);
    }
    CLI::App* sub = app.get_subcommands().front();
    const std::string cmd = sub->get_name();

    overlay.resolve_seed(sub->get_option_no_throw("--seed"), seed);
    overlay.resolve(sub->get_option_no_throw("--preset"), "preset", preset);

    nlohmann::json resolved;
    resolved["seed"] = seed;
    resolved["preset"] = preset;

    if (cmd == "synth") {
      overlay.resolve(sub->get_option_no_throw("--n"), "n", synth_n);
      overlay.resolve(sub->get_option_no_throw("--kind"), "kind", synth_kind);
      overlay.resolve(sub->get_option_no_throw("--out"), "out", synth_out);
      overlay.resolve(sub->get_option_no_throw("--task"), "task", synth_task);
      overlay.resolve(sub->get_option_no_throw("--frames"), "frames", synth_frames);
      overlay.resolve(sub->get_option_no_throw("--audio-seconds"), "audio_seconds",
                      synth_audio_seconds);
      resolved.update({{"n", synth_n},
                       {"kind", synth_kind},
                       {"out", synth_out},
                       {"task", synth_task},
                       {"frames", synth_frames},
                       {"audio_seconds", synth_audio_seconds}});
      out << "resolved config: " << resolved.dump() << "\n";

      Modality kind = synth_kind == "video"   ? Modality::kVideo
                      : synth_kind == "image" ? Modality::kImage
                                              : Modality::kAudio;
      SynthOptions opt;
      opt.n_frames = synth_frames;
      opt.audio_seconds = synth_audio_seconds;
      opt.task = synth_task == "caption" ? RecordKind::kCaption : RecordKind::kInstruction;
      const std::string manifest = synth_generate(seed, synth_n, kind, synth_out, opt);
      out << "wrote " << synth_n << " " << synth_kind << " examples, manifest " << manifest
          << "\n";
      return 0;
    }

    if (cmd == "preprocess") {
      overlay.resolve(sub->get_option_no_throw("--manifest"), "manifest", pp_manifest);
      overlay.resolve(sub->get_option_no_throw("--out"), "out", pp_out);
      resolved.update({{"manifest", pp_manifest}, {"out", pp_out}});
      out << "resolved config: " << resolved.dump() << "\n";
      run_preprocess(pp_manifest, pp_out, preset_config(preset), out);
      return 0;
    }

    if (cmd == "pretrain" || cmd == "finetune") {
      overlay.resolve(sub->get_option_no_throw("--branch"), "branch", tr_branch);
      overlay.resolve(sub->get_option_no_throw("--manifest"), "manifest", tr_manifest);
      overlay.resolve(sub->get_option_no_throw("--steps"), "steps", tr_steps);
      overlay.resolve(sub->get_option_no_throw("--batch-size"), "batch_size", tr_batch);
      overlay.resolve(sub->get_option_no_throw("--lr"), "lr", tr_lr);
      overlay.resolve(sub->get_option_no_throw("--weight-decay"), "weight_decay", tr_wd);
      overlay.resolve(sub->get_option_no_throw("--out"), "out", tr_out);
      overlay.resolve(sub->get_option_no_throw("--log"), "log", tr_log);
      overlay.resolve(sub->get_option_no_throw("--log-every"), "log_every", tr_log_every);
      overlay.resolve(sub->get_option_no_throw("--mel-cache"), "mel_cache", tr_mel_cache);
      overlay.resolve(sub->get_option_no_throw("--embeddings"), "embeddings", tr_embeddings);
      overlay.resolve(sub->get_option_no_throw("--fixture-dir"), "fixture_dir", tr_fixture_dir);
      overlay.resolve(sub->get_option_no_throw("--fixture-steps"), "fixture_steps",
                      tr_fixture_steps);
      if (cmd == "finetune") {
        overlay.resolve(sub->get_option_no_throw("--base"), "base", tr_base);
      }

      TrainConfig cfg;
      cfg.branch = branch_from_string(tr_branch);
      cfg.stage = cmd == "pretrain" ? TrainStage::kPretrain : TrainStage::kFinetune;
      cfg.model = preset_config(preset);
      cfg.manifest_path = tr_manifest;
      cfg.steps = tr_steps;
      cfg.batch_size = tr_batch;
      cfg.seed = seed;
      cfg.optim.lr = tr_lr;
      cfg.optim.weight_decay = tr_wd;
      cfg.out_checkpoint = tr_out;
      cfg.log_path = tr_log;
      cfg.log_every = tr_log_every;
      cfg.mel_cache_path = tr_mel_cache;
      cfg.embeddings_path = tr_embeddings;
      cfg.fixture_dir = tr_fixture_dir;
      cfg.fixture_steps = tr_fixture_steps;
      cfg.base_checkpoint = tr_base;

      resolved.update({{"branch", tr_branch},
                       {"manifest", tr_manifest},
                       {"steps", tr_steps},
                       {"batch_size", tr_batch},
                       {"lr", tr_lr},
                       {"weight_decay", tr_wd},
                       {"out", tr_out},
                       {"log", tr_log},
                       {"base", tr_base},
                       {"fixture_dir", tr_fixture_dir},
                       {"fixture_steps", tr_fixture_steps}});
      out << "resolved config: " << resolved.dump() << "\n";

      StageResult<float> result = cmd == "pretrain" ? pretrain_stage<float>(cfg, &out)
                                                    : finetune_stage<float>(cfg, &out);
      out << "done: steps=" << cfg.steps
          << " initial_running_loss=" << fmt6(result.report.initial_running)
          << " final_running_loss=" << fmt6(result.report.final_running) << "\n";
      if (!cfg.out_checkpoint.empty()) out << "checkpoint: " << cfg.out_checkpoint << "\n";
      return 0;
    }

    if (cmd == "gradcheck") {
      overlay.resolve(sub->get_option_no_throw("--branch"), "branch", gc_branch);
      overlay.resolve(sub->get_option_no_throw("--h"), "h", gc_h);
      if (sub->get_option_no_throw("--preset")->count() == 0 && preset == "default") {
        preset = "toy";  // full-parameter sweeps want the small config
      }
      resolved["preset"] = preset;
      resolved.update({{"branch", gc_branch}, {"h", gc_h}});
      out << "resolved config: " << resolved.dump() << "\n";
      if (!(gc_h > 0)) throw ValueError("gradcheck: step h must be positive");
      const double worst = run_gradcheck(preset_config(preset), seed, gc_h, gc_branch, out);
      return worst <= 1e-4 ? 0 : 2;
    }

    if (cmd == "generate") {
      overlay.resolve(sub->get_option_no_throw("--checkpoint"), "checkpoint", gen_checkpoint);
      overlay.resolve(sub->get_option_no_throw("--media"), "media", gen_media);
      overlay.resolve(sub->get_option_no_throw("--audio-media"), "audio_media",
                      gen_audio_media);
      overlay.resolve(sub->get_option_no_throw("--instruction"), "instruction",
                      gen_instruction);
      overlay.resolve(sub->get_option_no_throw("--max-len"), "max_len", gen_max_len);
      resolved.update({{"checkpoint", gen_checkpoint},
                       {"media", gen_media},
                       {"audio_media", gen_audio_media},
                       {"instruction", gen_instruction},
                       {"max_len", gen_max_len}});
      out << "resolved config: " << resolved.dump() << "\n";

      Model<float> model = model_from_checkpoint<float>(load_checkpoint(gen_checkpoint));
      MediaInput<float> media = load_media_features(model, gen_media, gen_audio_media);
      const std::string reply =
          gen_instruction.empty() ? generate_caption(model, media, gen_max_len)
                                  : generate_answer(model, media, gen_instruction, gen_max_len);
      out << reply << "\n";
      return 0;
    }

    if (cmd == "chat") {
      overlay.resolve(sub->get_option_no_throw("--checkpoint"), "checkpoint", chat_checkpoint);
      overlay.resolve(sub->get_option_no_throw("--media"), "media", chat_media);
      overlay.resolve(sub->get_option_no_throw("--audio-media"), "audio_media",
                      chat_audio_media);
      overlay.resolve(sub->get_option_no_throw("--max-len"), "max_len", chat_max_len);
      resolved.update({{"checkpoint", chat_checkpoint},
                       {"media", chat_media},
                       {"audio_media", chat_audio_media},
                       {"max_len", chat_max_len}});
      out << "resolved config: " << resolved.dump() << "\n";

      Model<float> model = model_from_checkpoint<float>(load_checkpoint(chat_checkpoint));
      MediaInput<float> media;
      try {
        media = load_media_features(model, chat_media, chat_audio_media);
      } catch (const Error& e) {
        out << "error: " << e.what() << " (continuing without media)\n";
      }
      chat_repl(model, media, in, out, chat_max_len);
      return 0;
    }

    err << "error: unknown subcommand\n";
    return 1;
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace avqf::cli
