#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "avqf/config.hpp"
#include "avqf/error.hpp"
#include "avqf/layers.hpp"
#include "avqf/tensor.hpp"

namespace avqf {

// Versioned named-tensor container.
// Layout (little-endian): magic "AVQF", u32 version, u64 entry count; per
// entry: u32 name length, UTF-8 name, u32 rank, u64 extents, u8 dtype
// (0 = f32, 1 = raw bytes), u8 frozen flag, payload. Entries are sorted by
// name on save, so identical contents give identical bytes.

constexpr uint32_t kCheckpointVersion = 1;
constexpr uint8_t kDtypeF32 = 0;
constexpr uint8_t kDtypeBytes = 1;
constexpr const char* kMetaEntryName = "__meta";

struct CheckpointEntry {
  std::string name;
  Shape shape;
  uint8_t dtype = kDtypeF32;
  bool frozen = false;
  std::vector<float> f32;
  std::vector<uint8_t> bytes;

  bool operator==(const CheckpointEntry&) const = default;
};

// Training provenance carried inside the container as a JSON byte entry.
struct TrainMeta {
  uint64_t step = 0;
  std::string stage;   // "pretrain", "finetune", "fixture", "init"
  std::string branch;  // "vision", "audio", or "" when not branch-specific
  uint64_t seed = 0;
  uint64_t config_hash = 0;
  nlohmann::json config;  // full resolved ModelConfig
};

inline nlohmann::json meta_to_json(const TrainMeta& m) {
  nlohmann::json j;
  j["step"] = m.step;
  j["stage"] = m.stage;
  j["branch"] = m.branch;
  j["seed"] = m.seed;
  j["config_hash"] = m.config_hash;
  j["config"] = m.config;
  return j;
}

inline TrainMeta meta_from_json(const nlohmann::json& j) {
  TrainMeta m;
  m.step = j.at("step").get<uint64_t>();
  m.stage = j.at("stage").get<std::string>();
  m.branch = j.at("branch").get<std::string>();
  m.seed = j.at("seed").get<uint64_t>();
  m.config_hash = j.at("config_hash").get<uint64_t>();
  m.config = j.at("config");
  return m;
}

struct CheckpointBundle {
  uint32_t version = kCheckpointVersion;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }

  bool has_meta() const { return find(kMetaEntryName) != nullptr; }

  TrainMeta meta() const {
    const CheckpointEntry* e = find(kMetaEntryName);
    if (!e) throw SchemaError("checkpoint: no __meta entry");
    try {
      return meta_from_json(nlohmann::json::parse(e->bytes.begin(), e->bytes.end()));
    } catch (const nlohmann::json::exception& ex) {
      throw SchemaError(std::string("checkpoint: bad __meta entry: ") + ex.what());
    }
  }

  void set_meta(const TrainMeta& m) {
    const std::string dump = meta_to_json(m).dump();
    CheckpointEntry e;
    e.name = kMetaEntryName;
    e.shape = {dump.size()};
    e.dtype = kDtypeBytes;
    e.bytes.assign(dump.begin(), dump.end());
    entries.erase(std::remove_if(entries.begin(), entries.end(),
                                 [](const CheckpointEntry& x) {
                                   return x.name == kMetaEntryName;
                                 }),
                  entries.end());
    entries.push_back(std::move(e));
    sort_entries();
  }

  void sort_entries() {
    std::sort(entries.begin(), entries.end(),
              [](const CheckpointEntry& a, const CheckpointEntry& b) { return a.name < b.name; });
  }
};

template <typename Real>
CheckpointBundle bundle_from_params(const NamedTensors<Real>& params, const TrainMeta& meta) {
  CheckpointBundle b;
  for (const auto& [name, t] : params) {
    CheckpointEntry e;
    e.name = name;
    e.shape = t.shape();
    e.dtype = kDtypeF32;
    e.frozen = !t.requires_grad();
    e.f32.resize(t.numel());
    for (size_t i = 0; i < t.numel(); ++i) e.f32[i] = static_cast<float>(t.data()[i]);
    b.entries.push_back(std::move(e));
  }
  b.set_meta(meta);
  return b;
}

// Copies checkpoint data into matching tensors by name; shapes must agree.
// Frozen flags travel with the entries. Missing names are an error when
// strict, ignored otherwise; extra checkpoint entries are always fine.
template <typename Real>
void apply_to_params(const CheckpointBundle& b, NamedTensors<Real>& params, bool strict = true) {
  for (auto& [name, t] : params) {
    const CheckpointEntry* e = b.find(name);
    if (!e) {
      if (strict) throw SchemaError("checkpoint: missing entry '" + name + "'");
      continue;
    }
    if (e->dtype != kDtypeF32) throw SchemaError("checkpoint: entry '" + name + "' is not f32");
    if (e->shape != t.shape()) {
      throw ShapeError("checkpoint: entry '" + name + "' has shape " + shape_str(e->shape) +
                       ", tensor expects " + shape_str(t.shape()));
    }
    for (size_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<Real>(e->f32[i]);
    t.set_requires_grad(!e->frozen);
  }
}

// ---------------------------------------------------------------------------
// Binary io
// ---------------------------------------------------------------------------

namespace ckpt_detail {

inline void put_u32(std::ostream& f, uint32_t x) {
  unsigned char b[4] = {static_cast<unsigned char>(x & 0xff),
                        static_cast<unsigned char>((x >> 8) & 0xff),
                        static_cast<unsigned char>((x >> 16) & 0xff),
                        static_cast<unsigned char>((x >> 24) & 0xff)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& f, uint64_t x) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((x >> (8 * i)) & 0xff);
  f.write(reinterpret_cast<const char*>(b), 8);
}

inline uint32_t get_u32(std::istream& f, const std::string& path) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4)) {
    throw FormatError("load_checkpoint: truncated file " + path);
  }
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline uint64_t get_u64(std::istream& f, const std::string& path) {
  unsigned char b[8];
  if (!f.read(reinterpret_cast<char*>(b), 8)) {
    throw FormatError("load_checkpoint: truncated file " + path);
  }
  uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= static_cast<uint64_t>(b[i]) << (8 * i);
  return x;
}

}  // namespace ckpt_detail

inline void save_checkpoint(const std::string& path, const CheckpointBundle& bundle) {
  namespace cd = ckpt_detail;
  CheckpointBundle sorted = bundle;
  sorted.sort_entries();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("save_checkpoint: cannot write " + path);
  f.write("AVQF", 4);
  cd::put_u32(f, sorted.version);
  cd::put_u64(f, sorted.entries.size());
  for (const auto& e : sorted.entries) {
    cd::put_u32(f, static_cast<uint32_t>(e.name.size()));
    f.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    cd::put_u32(f, static_cast<uint32_t>(e.shape.size()));
    for (size_t ext : e.shape) cd::put_u64(f, ext);
    f.put(static_cast<char>(e.dtype));
    f.put(e.frozen ? 1 : 0);
    if (e.dtype == kDtypeF32) {
      f.write(reinterpret_cast<const char*>(e.f32.data()),
              static_cast<std::streamsize>(e.f32.size() * sizeof(float)));
    } else {
      f.write(reinterpret_cast<const char*>(e.bytes.data()),
              static_cast<std::streamsize>(e.bytes.size()));
    }
  }
  if (!f) throw IoError("save_checkpoint: write failed for " + path);
}

inline CheckpointBundle load_checkpoint(const std::string& path) {
  namespace cd = ckpt_detail;
  if (!std::filesystem::exists(path)) throw IoError("load_checkpoint: no such file: " + path);
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_checkpoint: cannot open " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, "AVQF", 4) != 0) {
    throw FormatError("load_checkpoint: bad magic in " + path);
  }
  CheckpointBundle b;
  b.version = cd::get_u32(f, path);
  if (b.version != kCheckpointVersion) {
    throw FormatError("load_checkpoint: unsupported version " + std::to_string(b.version));
  }
  const uint64_t count = cd::get_u64(f, path);
  b.entries.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const uint32_t name_len = cd::get_u32(f, path);
    e.name.resize(name_len);
    if (!f.read(e.name.data(), name_len)) {
      throw FormatError("load_checkpoint: truncated name in " + path);
    }
    const uint32_t rank = cd::get_u32(f, path);
    e.shape.resize(rank);
    size_t numel = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      e.shape[r] = static_cast<size_t>(cd::get_u64(f, path));
      numel *= e.shape[r];
    }
    int dtype = f.get();
    int frozen = f.get();
    if (dtype == EOF || frozen == EOF) {
      throw FormatError("load_checkpoint: truncated entry header in " + path);
    }
    e.dtype = static_cast<uint8_t>(dtype);
    e.frozen = frozen != 0;
    if (e.dtype == kDtypeF32) {
      e.f32.resize(numel);
      if (!f.read(reinterpret_cast<char*>(e.f32.data()),
                  static_cast<std::streamsize>(numel * sizeof(float)))) {
        throw FormatError("load_checkpoint: truncated tensor data in " + path);
      }
    } else if (e.dtype == kDtypeBytes) {
      e.bytes.resize(numel);
      if (!f.read(reinterpret_cast<char*>(e.bytes.data()),
                  static_cast<std::streamsize>(numel))) {
        throw FormatError("load_checkpoint: truncated byte data in " + path);
      }
    } else {
      throw FormatError("load_checkpoint: unknown dtype code " + std::to_string(dtype));
    }
    b.entries.push_back(std::move(e));
  }
  return b;
}

}  // namespace avqf
