#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "avqf/error.hpp"
#include "avqf/tensor.hpp"

namespace avqf {

// Mono audio in [-1, 1]. Samples are kept in double so the downstream
// spectrogram is identical regardless of the tensor scalar type.
struct Waveform {
  std::vector<double> samples;
  int sample_rate = 0;

  double duration_seconds() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

struct MelConfig {
  int n_mels = 128;
  int n_fft = 512;
  int hop = 160;
  double log_floor = 1e-10;
};

struct AudioFrontendConfig {
  int sample_rate = 16000;
  double seg_seconds = 2.0;
  int n_segments = 4;  // M
  MelConfig mel;

  int segment_samples() const {
    return static_cast<int>(std::llround(seg_seconds * sample_rate));
  }
  int frames_per_segment() const {
    const int n = segment_samples();
    if (n < mel.n_fft) return 0;
    return 1 + (n - mel.n_fft) / mel.hop;
  }
};

// One 2-second clip as a log mel-energy grid.
template <typename Real>
struct SpectrogramClip {
  Tensor<Real> mel;  // [n_mels, n_frames]
  double segment_start = 0.0;
  double segment_duration = 0.0;
};

// ---------------------------------------------------------------------------
// WAV container (RIFF, PCM 16-bit, 1 or 2 channels)
// ---------------------------------------------------------------------------

namespace wav_detail {

inline uint32_t read_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

inline uint16_t read_u16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

inline void put_u32(std::vector<unsigned char>& v, uint32_t x) {
  v.push_back(x & 0xff);
  v.push_back((x >> 8) & 0xff);
  v.push_back((x >> 16) & 0xff);
  v.push_back((x >> 24) & 0xff);
}

inline void put_u16(std::vector<unsigned char>& v, uint16_t x) {
  v.push_back(x & 0xff);
  v.push_back((x >> 8) & 0xff);
}

}  // namespace wav_detail

inline Waveform load_wav(const std::string& path) {
  namespace wd = wav_detail;
  if (!std::filesystem::exists(path)) throw IoError("load_wav: no such file: " + path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_wav: cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw FormatError("load_wav: not a RIFF/WAVE file: " + path);
  }

  int channels = 0, bits = 0, rate = 0;
  bool have_fmt = false;
  const unsigned char* data_ptr = nullptr;
  size_t data_len = 0;
  size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
    const uint32_t len = wd::read_u32(bytes.data() + pos + 4);
    if (pos + 8 + len > bytes.size()) throw FormatError("load_wav: truncated chunk in " + path);
    const unsigned char* body = bytes.data() + pos + 8;
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (len < 16) throw FormatError("load_wav: short fmt chunk in " + path);
      const uint16_t format = wd::read_u16(body);
      channels = wd::read_u16(body + 2);
      rate = static_cast<int>(wd::read_u32(body + 4));
      bits = wd::read_u16(body + 14);
      if (format != 1) throw FormatError("load_wav: only PCM encoding supported: " + path);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      data_ptr = body;
      data_len = len;
    }
    pos += 8 + len + (len & 1);  // chunks are word aligned
  }
  if (!have_fmt || data_ptr == nullptr) {
    throw FormatError("load_wav: missing fmt or data chunk in " + path);
  }
  if (bits != 16) throw FormatError("load_wav: only 16-bit PCM supported: " + path);
  if (channels < 1 || channels > 2) {
    throw FormatError("load_wav: only mono or stereo supported: " + path);
  }
  if (rate <= 0) throw FormatError("load_wav: bad sample rate in " + path);

  const size_t frame_bytes = static_cast<size_t>(channels) * 2;
  const size_t n = data_len / frame_bytes;
  Waveform w;
  w.sample_rate = rate;
  w.samples.resize(n);
  for (size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int c = 0; c < channels; ++c) {
      const unsigned char* s = data_ptr + i * frame_bytes + c * 2;
      const int16_t v = static_cast<int16_t>(s[0] | (s[1] << 8));
      acc += static_cast<double>(v);
    }
    w.samples[i] = acc / channels / 32768.0;
  }
  return w;
}

inline void save_wav(const std::string& path, const Waveform& w) {
  namespace wd = wav_detail;
  if (w.sample_rate <= 0) throw ValueError("save_wav: sample rate must be positive");
  std::vector<unsigned char> out;
  const uint32_t data_len = static_cast<uint32_t>(w.samples.size() * 2);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  wd::put_u32(out, 36 + data_len);
  out.insert(out.end(), {'W', 'A', 'V', 'E'});
  out.insert(out.end(), {'f', 'm', 't', ' '});
  wd::put_u32(out, 16);
  wd::put_u16(out, 1);  // PCM
  wd::put_u16(out, 1);  // mono
  wd::put_u32(out, static_cast<uint32_t>(w.sample_rate));
  wd::put_u32(out, static_cast<uint32_t>(w.sample_rate * 2));
  wd::put_u16(out, 2);   // block align
  wd::put_u16(out, 16);  // bits
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  wd::put_u32(out, data_len);
  for (double s : w.samples) {
    const double c = std::clamp(s, -1.0, 1.0);
    const int16_t v = static_cast<int16_t>(std::lround(c * 32767.0));
    wd::put_u16(out, static_cast<uint16_t>(v));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("save_wav: cannot write " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("save_wav: write failed for " + path);
}

// ---------------------------------------------------------------------------
// Segment sampling
// ---------------------------------------------------------------------------

// Uniformly samples m segments of seg_seconds each: segment i starts at
// i * (D - seg) / (m - 1) for m > 1 (at 0 for m = 1), clamped to >= 0.
// Audio shorter than a segment is zero-padded at the tail.
inline std::vector<Waveform> sample_segments(const Waveform& w, int m,
                                             double seg_seconds = 2.0) {
  if (m < 1) throw ValueError("sample_segments: invalid segment count " + std::to_string(m));
  if (w.samples.empty()) throw ValueError("sample_segments: empty waveform");
  if (w.sample_rate <= 0) throw ValueError("sample_segments: bad sample rate");

  const double total = w.duration_seconds();
  const size_t seg_len = static_cast<size_t>(std::llround(seg_seconds * w.sample_rate));
  std::vector<Waveform> out;
  out.reserve(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    double start_sec = 0.0;
    if (m > 1) start_sec = i * (total - seg_seconds) / (m - 1);
    start_sec = std::max(0.0, start_sec);
    const size_t start = static_cast<size_t>(std::llround(start_sec * w.sample_rate));
    Waveform seg;
    seg.sample_rate = w.sample_rate;
    seg.samples.assign(seg_len, 0.0);
    for (size_t j = 0; j < seg_len && start + j < w.samples.size(); ++j) {
      seg.samples[j] = w.samples[start + j];
    }
    out.push_back(std::move(seg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mel spectrogram: Hann-windowed STFT power -> triangular HTK mel bank -> log
// ---------------------------------------------------------------------------

namespace mel_detail {

inline bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

// In-place iterative radix-2 FFT over interleaved complex pairs.
inline void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
  const size_t n = re.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * M_PI / static_cast<double>(len);
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (size_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (size_t k = 0; k < len / 2; ++k) {
        const double ur = re[i + k], ui = im[i + k];
        const double vr = re[i + k + len / 2] * cr - im[i + k + len / 2] * ci;
        const double vi = re[i + k + len / 2] * ci + im[i + k + len / 2] * cr;
        re[i + k] = ur + vr;
        im[i + k] = ui + vi;
        re[i + k + len / 2] = ur - vr;
        im[i + k + len / 2] = ui - vi;
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

// Triangular filterbank on the HTK mel scale spanning 0..sr/2.
// Returns n_mels rows of (n_fft/2 + 1) weights.
inline std::vector<std::vector<double>> mel_filterbank(int n_mels, int n_fft, int sample_rate) {
  const int n_bins = n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(0.0);
  const double mel_hi = hz_to_mel(sample_rate / 2.0);
  std::vector<double> pts(static_cast<size_t>(n_mels) + 2);
  for (int k = 0; k < n_mels + 2; ++k) {
    pts[k] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * k / (n_mels + 1));
  }
  std::vector<std::vector<double>> bank(static_cast<size_t>(n_mels),
                                        std::vector<double>(static_cast<size_t>(n_bins), 0.0));
  for (int i = 0; i < n_mels; ++i) {
    const double lo = pts[i], mid = pts[i + 1], hi = pts[i + 2];
    for (int b = 0; b < n_bins; ++b) {
      const double f = static_cast<double>(b) * sample_rate / n_fft;
      double wgt = 0.0;
      if (f >= lo && f <= mid && mid > lo) {
        wgt = (f - lo) / (mid - lo);
      } else if (f > mid && f <= hi && hi > mid) {
        wgt = (hi - f) / (hi - mid);
      }
      bank[i][b] = wgt;
    }
  }
  return bank;
}

}  // namespace mel_detail

template <typename Real>
SpectrogramClip<Real> mel_spectrogram(const Waveform& seg, const AudioFrontendConfig& cfg) {
  const MelConfig& mc = cfg.mel;
  if (mc.n_mels < 1) throw ConfigError("mel_spectrogram: n_mels must be >= 1");
  if (!mel_detail::is_power_of_two(mc.n_fft)) {
    throw ConfigError("mel_spectrogram: n_fft must be a power of two, got " +
                      std::to_string(mc.n_fft));
  }
  if (mc.hop < 1 || mc.n_fft < 2 * mc.hop) {
    throw ConfigError("mel_spectrogram: need n_fft >= 2*hop and hop >= 1");
  }
  if (seg.sample_rate != cfg.sample_rate) {
    throw ValueError("mel_spectrogram: segment rate " + std::to_string(seg.sample_rate) +
                     " differs from configured " + std::to_string(cfg.sample_rate) +
                     " (resampling is not supported)");
  }
  const size_t want = static_cast<size_t>(cfg.segment_samples());
  if (seg.samples.size() != want) {
    throw ValueError("mel_spectrogram: segment has " + std::to_string(seg.samples.size()) +
                     " samples, expected " + std::to_string(want));
  }

  const int n_fft = mc.n_fft, hop = mc.hop;
  const int n_bins = n_fft / 2 + 1;
  const int n_frames = cfg.frames_per_segment();
  if (n_frames < 1) throw ConfigError("mel_spectrogram: segment shorter than one window");

  std::vector<double> window(static_cast<size_t>(n_fft));
  for (int i = 0; i < n_fft; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / n_fft);
  }
  const auto bank = mel_detail::mel_filterbank(mc.n_mels, n_fft, cfg.sample_rate);

  Tensor<Real> out = Tensor<Real>::zeros({static_cast<size_t>(mc.n_mels),
                                          static_cast<size_t>(n_frames)});
  std::vector<double> re(static_cast<size_t>(n_fft)), im(static_cast<size_t>(n_fft));
  std::vector<double> power(static_cast<size_t>(n_bins));
  for (int t = 0; t < n_frames; ++t) {
    const size_t off = static_cast<size_t>(t) * hop;
    for (int i = 0; i < n_fft; ++i) {
      re[i] = seg.samples[off + i] * window[i];
      im[i] = 0.0;
    }
    mel_detail::fft_radix2(re, im);
    for (int b = 0; b < n_bins; ++b) power[b] = re[b] * re[b] + im[b] * im[b];
    for (int m = 0; m < mc.n_mels; ++m) {
      double acc = 0.0;
      for (int b = 0; b < n_bins; ++b) acc += bank[m][b] * power[b];
      out.at(static_cast<size_t>(m), static_cast<size_t>(t)) =
          static_cast<Real>(std::log(acc + mc.log_floor));
    }
  }

  SpectrogramClip<Real> clip;
  clip.mel = out;
  clip.segment_start = 0.0;
  clip.segment_duration = cfg.seg_seconds;
  return clip;
}

// Convenience: full front end, waveform to the M spectrogram clips.
template <typename Real>
std::vector<SpectrogramClip<Real>> audio_to_clips(const Waveform& w,
                                                  const AudioFrontendConfig& cfg) {
  auto segs = sample_segments(w, cfg.n_segments, cfg.seg_seconds);
  std::vector<SpectrogramClip<Real>> clips;
  clips.reserve(segs.size());
  double total = w.duration_seconds();
  for (size_t i = 0; i < segs.size(); ++i) {
    auto clip = mel_spectrogram<Real>(segs[i], cfg);
    double start = 0.0;
    if (cfg.n_segments > 1) {
      start = std::max(0.0, static_cast<double>(i) * (total - cfg.seg_seconds) /
                                (cfg.n_segments - 1));
    }
    clip.segment_start = start;
    clips.push_back(std::move(clip));
  }
  return clips;
}

}  // namespace avqf
