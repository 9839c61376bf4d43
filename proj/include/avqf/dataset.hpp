#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "avqf/audio.hpp"
#include "avqf/error.hpp"
#include "avqf/rng.hpp"

namespace avqf {

// ---------------------------------------------------------------------------
// AVVF raw video container
// magic "AVVF", u32 version, u32 N, u32 H, u32 W, u32 C,
// then N*H*W*C little-endian f32 pixels, row-major.
// ---------------------------------------------------------------------------

struct VideoFile {
  uint32_t n_frames = 0;
  uint32_t height = 0;
  uint32_t width = 0;
  uint32_t channels = 0;
  std::vector<float> pixels;  // [N][H][W][C]

  size_t frame_size() const {
    return static_cast<size_t>(height) * width * channels;
  }
  float at(size_t n, size_t y, size_t x, size_t c) const {
    return pixels[((n * height + y) * width + x) * channels + c];
  }
  float& at(size_t n, size_t y, size_t x, size_t c) {
    return pixels[((n * height + y) * width + x) * channels + c];
  }
};

constexpr uint32_t kAvvfVersion = 1;

namespace avvf_detail {

inline void put_u32(std::ofstream& f, uint32_t x) {
  unsigned char b[4] = {static_cast<unsigned char>(x & 0xff),
                        static_cast<unsigned char>((x >> 8) & 0xff),
                        static_cast<unsigned char>((x >> 16) & 0xff),
                        static_cast<unsigned char>((x >> 24) & 0xff)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4)) {
    throw FormatError("load_avvf: truncated header in " + path);
  }
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace avvf_detail

inline void save_avvf(const std::string& path, const VideoFile& v) {
  if (v.pixels.size() != static_cast<size_t>(v.n_frames) * v.frame_size()) {
    throw ValueError("save_avvf: pixel buffer does not match declared shape");
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("save_avvf: cannot write " + path);
  f.write("AVVF", 4);
  avvf_detail::put_u32(f, kAvvfVersion);
  avvf_detail::put_u32(f, v.n_frames);
  avvf_detail::put_u32(f, v.height);
  avvf_detail::put_u32(f, v.width);
  avvf_detail::put_u32(f, v.channels);
  f.write(reinterpret_cast<const char*>(v.pixels.data()),
          static_cast<std::streamsize>(v.pixels.size() * sizeof(float)));
  if (!f) throw IoError("save_avvf: write failed for " + path);
}

inline VideoFile load_avvf(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("load_avvf: no such file: " + path);
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_avvf: cannot open " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, "AVVF", 4) != 0) {
    throw FormatError("load_avvf: bad magic in " + path);
  }
  const uint32_t version = avvf_detail::get_u32(f, path);
  if (version != kAvvfVersion) {
    throw FormatError("load_avvf: unsupported version " + std::to_string(version));
  }
  VideoFile v;
  v.n_frames = avvf_detail::get_u32(f, path);
  v.height = avvf_detail::get_u32(f, path);
  v.width = avvf_detail::get_u32(f, path);
  v.channels = avvf_detail::get_u32(f, path);
  if (v.n_frames == 0 || v.height == 0 || v.width == 0 || v.channels == 0) {
    throw FormatError("load_avvf: zero extent in " + path);
  }
  const size_t count = static_cast<size_t>(v.n_frames) * v.frame_size();
  v.pixels.resize(count);
  if (!f.read(reinterpret_cast<char*>(v.pixels.data()),
              static_cast<std::streamsize>(count * sizeof(float)))) {
    throw FormatError("load_avvf: truncated pixel data in " + path);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Manifest records
// ---------------------------------------------------------------------------

enum class Modality { kVideo, kImage, kAudio };
enum class RecordKind { kCaption, kInstruction };

inline std::string to_string(Modality m) {
  switch (m) {
    case Modality::kVideo: return "video";
    case Modality::kImage: return "image";
    case Modality::kAudio: return "audio";
  }
  return "?";
}

inline std::string to_string(RecordKind k) {
  return k == RecordKind::kCaption ? "caption" : "instruction";
}

struct ManifestRecord {
  std::string id;
  std::string media_path;
  Modality modality = Modality::kVideo;
  RecordKind kind = RecordKind::kCaption;
  std::string caption;      // caption kind only
  std::string instruction;  // instruction kind only
  std::string response;     // instruction kind only

  bool operator==(const ManifestRecord&) const = default;
};

inline nlohmann::json record_to_json(const ManifestRecord& r) {
  nlohmann::json j;
  j["id"] = r.id;
  j["media_path"] = r.media_path;
  j["modality"] = to_string(r.modality);
  j["kind"] = to_string(r.kind);
  if (r.kind == RecordKind::kCaption) {
    j["caption"] = r.caption;
  } else {
    j["instruction"] = r.instruction;
    j["response"] = r.response;
  }
  return j;
}

inline void save_manifest(const std::string& path, const std::vector<ManifestRecord>& records) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("save_manifest: cannot write " + path);
  for (const auto& r : records) f << record_to_json(r).dump() << "\n";
  if (!f) throw IoError("save_manifest: write failed for " + path);
}

inline std::vector<ManifestRecord> load_manifest(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("load_manifest: no such file: " + path);
  std::ifstream f(path);
  if (!f) throw IoError("load_manifest: cannot open " + path);

  std::vector<ManifestRecord> out;
  std::set<std::string> seen_ids;
  std::string line;
  size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("load_manifest: line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object()) {
      throw ParseError("load_manifest: line " + std::to_string(line_no) + ": not a JSON object");
    }
    auto get_str = [&](const char* key) -> std::string {
      if (!j.contains(key) || !j[key].is_string()) {
        throw SchemaError("load_manifest: line " + std::to_string(line_no) +
                          ": missing string field '" + key + "'");
      }
      return j[key].get<std::string>();
    };

    ManifestRecord r;
    r.id = get_str("id");
    r.media_path = get_str("media_path");
    const std::string modality = get_str("modality");
    if (modality == "video") {
      r.modality = Modality::kVideo;
    } else if (modality == "image") {
      r.modality = Modality::kImage;
    } else if (modality == "audio") {
      r.modality = Modality::kAudio;
    } else {
      throw SchemaError("load_manifest: line " + std::to_string(line_no) +
                        ": unknown modality '" + modality + "'");
    }
    const std::string kind = get_str("kind");
    if (kind == "caption") {
      r.kind = RecordKind::kCaption;
      r.caption = get_str("caption");
      if (j.contains("instruction") || j.contains("response")) {
        throw SchemaError("load_manifest: line " + std::to_string(line_no) +
                          ": caption record must not carry instruction fields");
      }
    } else if (kind == "instruction") {
      r.kind = RecordKind::kInstruction;
      r.instruction = get_str("instruction");
      r.response = get_str("response");
      if (j.contains("caption")) {
        throw SchemaError("load_manifest: line " + std::to_string(line_no) +
                          ": instruction record must not carry a caption field");
      }
    } else {
      throw SchemaError("load_manifest: line " + std::to_string(line_no) + ": unknown kind '" +
                        kind + "'");
    }
    // cheap consistency check between the declared modality and the file type
    const bool is_wav = r.media_path.size() >= 4 &&
                        r.media_path.compare(r.media_path.size() - 4, 4, ".wav") == 0;
    if ((r.modality == Modality::kAudio) != is_wav) {
      throw SchemaError("load_manifest: line " + std::to_string(line_no) + ": modality '" +
                        modality + "' does not match media file '" + r.media_path + "'");
    }
    if (!seen_ids.insert(r.id).second) {
      throw SchemaError("load_manifest: duplicate id '" + r.id + "' at line " +
                        std::to_string(line_no));
    }
    out.push_back(std::move(r));
  }
  return out;
}

// Media paths in manifests are relative to the manifest's directory.
inline std::string resolve_media_path(const std::string& manifest_path,
                                      const ManifestRecord& r) {
  std::filesystem::path p(r.media_path);
  if (p.is_absolute()) return r.media_path;
  return (std::filesystem::path(manifest_path).parent_path() / p).string();
}

// ---------------------------------------------------------------------------
// Synthetic scene grammar
// ---------------------------------------------------------------------------

enum class SceneShape { kSquare, kCircle };
enum class SceneColor { kRed, kGreen, kBlue };
enum class SceneMotion { kLeft, kRight, kUp, kDown, kStatic };
enum class ToneContour { kRising, kFalling, kFlat };

inline std::string to_string(SceneShape s) { return s == SceneShape::kSquare ? "square" : "circle"; }
inline std::string to_string(SceneColor c) {
  switch (c) {
    case SceneColor::kRed: return "red";
    case SceneColor::kGreen: return "green";
    case SceneColor::kBlue: return "blue";
  }
  return "?";
}
inline std::string to_string(SceneMotion m) {
  switch (m) {
    case SceneMotion::kLeft: return "left";
    case SceneMotion::kRight: return "right";
    case SceneMotion::kUp: return "up";
    case SceneMotion::kDown: return "down";
    case SceneMotion::kStatic: return "static";
  }
  return "?";
}
inline std::string to_string(ToneContour c) {
  switch (c) {
    case ToneContour::kRising: return "rising";
    case ToneContour::kFalling: return "falling";
    case ToneContour::kFlat: return "flat";
  }
  return "?";
}

// One synthetic example: either a moving-shape clip or a tone.
struct SyntheticScene {
  bool is_audio = false;
  // visual fields
  SceneShape shape = SceneShape::kSquare;
  SceneColor color = SceneColor::kRed;
  SceneMotion motion = SceneMotion::kStatic;
  int n_frames = 8;
  // audio fields
  ToneContour contour = ToneContour::kFlat;
  double base_freq = 440.0;
};

// The caption template is a bijection over the enum grid: 5 motions x
// 3 colors x 2 shapes for visual scenes, 3 contours for tones.
inline std::string caption_of(const SyntheticScene& s) {
  if (s.is_audio) return "a " + to_string(s.contour) + " tone";
  const std::string head = "a " + to_string(s.color) + " " + to_string(s.shape);
  if (s.motion == SceneMotion::kStatic) return head + " stays still";
  return head + " moves " + to_string(s.motion);
}

// Inverse of caption_of; throws on anything outside the grammar.
inline SyntheticScene parse_caption(const std::string& caption) {
  SyntheticScene s;
  for (ToneContour c : {ToneContour::kRising, ToneContour::kFalling, ToneContour::kFlat}) {
    if (caption == "a " + to_string(c) + " tone") {
      s.is_audio = true;
      s.contour = c;
      return s;
    }
  }
  for (SceneColor c : {SceneColor::kRed, SceneColor::kGreen, SceneColor::kBlue}) {
    for (SceneShape sh : {SceneShape::kSquare, SceneShape::kCircle}) {
      const std::string head = "a " + to_string(c) + " " + to_string(sh);
      if (caption == head + " stays still") {
        s.color = c;
        s.shape = sh;
        s.motion = SceneMotion::kStatic;
        return s;
      }
      for (SceneMotion m :
           {SceneMotion::kLeft, SceneMotion::kRight, SceneMotion::kUp, SceneMotion::kDown}) {
        if (caption == head + " moves " + to_string(m)) {
          s.color = c;
          s.shape = sh;
          s.motion = m;
          return s;
        }
      }
    }
  }
  throw ValueError("parse_caption: '" + caption + "' is outside the caption grammar");
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

struct SynthOptions {
  int n_frames = 8;
  int height = 32;
  int width = 32;
  double audio_seconds = 8.0;
  int sample_rate = 16000;
  RecordKind task = RecordKind::kCaption;
};

namespace synth_detail {

inline void color_rgb(SceneColor c, float rgb[3]) {
  rgb[0] = rgb[1] = rgb[2] = 0.0f;
  switch (c) {
    case SceneColor::kRed: rgb[0] = 1.0f; break;
    case SceneColor::kGreen: rgb[1] = 1.0f; break;
    case SceneColor::kBlue: rgb[2] = 1.0f; break;
  }
}

}  // namespace synth_detail

// Renders the scene as N frames of a colored shape on a dark background,
// translated along the motion axis over the clip.
inline VideoFile render_scene(const SyntheticScene& s, const SynthOptions& opt) {
  VideoFile v;
  v.n_frames = static_cast<uint32_t>(s.n_frames);
  v.height = static_cast<uint32_t>(opt.height);
  v.width = static_cast<uint32_t>(opt.width);
  v.channels = 3;
  v.pixels.assign(static_cast<size_t>(v.n_frames) * v.frame_size(), 0.05f);

  float rgb[3];
  synth_detail::color_rgb(s.color, rgb);
  const double cy0 = opt.height / 2.0, cx0 = opt.width / 2.0;
  const double travel = opt.width / 4.0 - 1.0;

  for (uint32_t t = 0; t < v.n_frames; ++t) {
    const double u = v.n_frames > 1 ? static_cast<double>(t) / (v.n_frames - 1) : 0.0;
    double cy = cy0, cx = cx0;
    switch (s.motion) {
      case SceneMotion::kLeft: cx = cx0 + travel - 2 * travel * u; break;
      case SceneMotion::kRight: cx = cx0 - travel + 2 * travel * u; break;
      case SceneMotion::kUp: cy = cy0 + travel - 2 * travel * u; break;
      case SceneMotion::kDown: cy = cy0 - travel + 2 * travel * u; break;
      case SceneMotion::kStatic: break;
    }
    const double half = 5.5;
    for (uint32_t y = 0; y < v.height; ++y) {
      for (uint32_t x = 0; x < v.width; ++x) {
        const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
        bool inside = false;
        if (s.shape == SceneShape::kSquare) {
          inside = std::abs(dy) <= half && std::abs(dx) <= half;
        } else {
          inside = dy * dy + dx * dx <= half * half;
        }
        if (inside) {
          for (int c = 0; c < 3; ++c) v.at(t, y, x, c) = rgb[c];
        }
      }
    }
  }
  return v;
}

// Renders the tone as a linear chirp: rising doubles the base frequency,
// falling halves it, flat holds it.
inline Waveform render_tone(const SyntheticScene& s, const SynthOptions& opt) {
  Waveform w;
  w.sample_rate = opt.sample_rate;
  const size_t n = static_cast<size_t>(std::llround(opt.audio_seconds * opt.sample_rate));
  w.samples.resize(n);
  const double f0 = s.base_freq;
  double f1 = f0;
  if (s.contour == ToneContour::kRising) f1 = 2.0 * f0;
  if (s.contour == ToneContour::kFalling) f1 = 0.5 * f0;
  const double dur = opt.audio_seconds;
  for (size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / opt.sample_rate;
    const double phase = 2.0 * M_PI * (f0 * t + (f1 - f0) * t * t / (2.0 * dur));
    w.samples[i] = 0.5 * std::sin(phase);
  }
  return w;
}

// Mechanically derived question/answer pairs for a scene.
inline std::pair<std::string, std::string> instruction_of(const SyntheticScene& s,
                                                          size_t variant) {
  if (s.is_audio) {
    switch (variant % 2) {
      case 0: return {"describe the audio", caption_of(s)};
      default: return {"does the tone rise or fall?", "the tone is " + to_string(s.contour)};
    }
  }
  switch (variant % 3) {
    case 0: return {"what color is the shape?", "the shape is " + to_string(s.color)};
    case 1: return {"what shape is in the video?", "it is a " + to_string(s.shape)};
    default: return {"describe the video", caption_of(s)};
  }
}

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

// Emits n media files plus a JSONL manifest into out_dir and returns the
// manifest path. Everything is a pure function of (seed, n, kind, opt).
inline std::string synth_generate(uint64_t seed, size_t n, Modality kind,
                                  const std::string& out_dir,
                                  const SynthOptions& opt = SynthOptions{}) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::is_directory(out_dir)) {
    throw IoError("synth_generate: cannot create output directory " + out_dir);
  }
  RngState rng = RngState(seed).fork("synth-" + to_string(kind));

  const std::string task_tag = opt.task == RecordKind::kCaption ? "captions" : "instructions";
  const std::string manifest_path =
      (fs::path(out_dir) / (task_tag + "_" + to_string(kind) + ".jsonl")).string();

  std::vector<ManifestRecord> records;
  for (size_t i = 0; i < n; ++i) {
    SyntheticScene s;
    char idx[24];
    std::snprintf(idx, sizeof(idx), "%03zu", i);
    std::string media_name;
    if (kind == Modality::kAudio) {
      s.is_audio = true;
      s.contour = static_cast<ToneContour>(rng.next_below(3));
      media_name = "audio_" + std::string(idx) + ".wav";
      save_wav((fs::path(out_dir) / media_name).string(), render_tone(s, opt));
    } else {
      s.shape = static_cast<SceneShape>(rng.next_below(2));
      s.color = static_cast<SceneColor>(rng.next_below(3));
      s.motion = kind == Modality::kImage ? SceneMotion::kStatic
                                          : static_cast<SceneMotion>(rng.next_below(5));
      s.n_frames = kind == Modality::kImage ? 1 : opt.n_frames;
      media_name = to_string(kind) + "_" + std::string(idx) + ".avvf";
      save_avvf((fs::path(out_dir) / media_name).string(), render_scene(s, opt));
    }

    ManifestRecord r;
    r.media_path = media_name;
    r.modality = kind;
    if (opt.task == RecordKind::kCaption) {
      r.id = to_string(kind) + "-" + idx;
      r.kind = RecordKind::kCaption;
      r.caption = caption_of(s);
    } else {
      r.id = to_string(kind) + "-instr-" + idx;
      r.kind = RecordKind::kInstruction;
      auto [q, a] = instruction_of(s, i);
      r.instruction = q;
      r.response = a;
    }
    records.push_back(std::move(r));
  }
  save_manifest(manifest_path, records);
  return manifest_path;
}

// ---------------------------------------------------------------------------
// Deterministic batching
// ---------------------------------------------------------------------------

// Shuffles record indices as a pure function of (seed, epoch), then groups
// them by modality so no batch mixes soft-prompt layouts. The union of all
// batches is exactly the record multiset; the final partial batch per
// modality is retained.
inline std::vector<std::vector<size_t>> batch_iter(const std::vector<ManifestRecord>& records,
                                                   size_t batch_size, uint64_t seed,
                                                   uint64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch_iter: batch_size must be >= 1");
  std::vector<size_t> idx(records.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  RngState rng = RngState(seed).fork("batch-epoch-" + std::to_string(epoch));
  rng.shuffle(idx);

  std::vector<std::vector<size_t>> batches;
  for (Modality m : {Modality::kVideo, Modality::kImage, Modality::kAudio}) {
    std::vector<size_t> group;
    for (size_t i : idx) {
      if (records[i].modality == m) group.push_back(i);
    }
    for (size_t off = 0; off < group.size(); off += batch_size) {
      const size_t end = std::min(off + batch_size, group.size());
      batches.emplace_back(group.begin() + off, group.begin() + end);
    }
  }
  return batches;
}

}  // namespace avqf
