#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "avqf/audio.hpp"

using namespace avqf;
namespace fs = std::filesystem;

namespace {

class TmpDir {
 public:
  TmpDir() {
    dir_ = fs::temp_directory_path() / ("avqf_audio_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
  }
  ~TmpDir() { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

 private:
  fs::path dir_;
};

Waveform sine(double freq, double seconds, int rate, double amp = 1.0) {
  Waveform w;
  w.sample_rate = rate;
  const size_t n = static_cast<size_t>(std::llround(seconds * rate));
  w.samples.resize(n);
  for (size_t i = 0; i < n; ++i) {
    w.samples[i] = amp * std::sin(2.0 * M_PI * freq * i / rate);
  }
  return w;
}

// Independent oracle: naive O(n^2) DFT per Hann frame plus a separately
// derived triangular mel mapping. Shares no code with the implementation.
std::vector<size_t> oracle_argmax_rows(const Waveform& seg, const AudioFrontendConfig& cfg) {
  const int n_fft = cfg.mel.n_fft, hop = cfg.mel.hop, n_mels = cfg.mel.n_mels;
  const int n_bins = n_fft / 2 + 1;
  const int n_frames = cfg.frames_per_segment();

  auto mel_of = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  auto hz_of = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  const double hi = mel_of(cfg.sample_rate / 2.0);
  std::vector<double> edge(n_mels + 2);
  for (int k = 0; k < n_mels + 2; ++k) edge[k] = hz_of(hi * k / (n_mels + 1));

  std::vector<size_t> rows;
  for (int t = 0; t < n_frames; ++t) {
    std::vector<double> frame(n_fft);
    for (int i = 0; i < n_fft; ++i) {
      const double hann = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / n_fft);
      frame[i] = seg.samples[t * hop + i] * hann;
    }
    std::vector<double> power(n_bins);
    for (int b = 0; b < n_bins; ++b) {
      double re = 0, im = 0;
      for (int i = 0; i < n_fft; ++i) {
        const double ang = -2.0 * M_PI * b * i / n_fft;
        re += frame[i] * std::cos(ang);
        im += frame[i] * std::sin(ang);
      }
      power[b] = re * re + im * im;
    }
    double best = -1;
    size_t best_m = 0;
    for (int m = 0; m < n_mels; ++m) {
      double acc = 0;
      for (int b = 0; b < n_bins; ++b) {
        const double f = static_cast<double>(b) * cfg.sample_rate / n_fft;
        double w = 0;
        if (f >= edge[m] && f <= edge[m + 1] && edge[m + 1] > edge[m]) {
          w = (f - edge[m]) / (edge[m + 1] - edge[m]);
        } else if (f > edge[m + 1] && f <= edge[m + 2]) {
          w = (edge[m + 2] - f) / (edge[m + 2] - edge[m + 1]);
        }
        acc += w * power[b];
      }
      if (acc > best) {
        best = acc;
        best_m = static_cast<size_t>(m);
      }
    }
    rows.push_back(best_m);
  }
  return rows;
}

}  // namespace

TEST(Wav, SilenceRoundTrip) {
  TmpDir tmp;
  Waveform w;
  w.sample_rate = 16000;
  w.samples.assign(16000, 0.0);
  save_wav(tmp.path("silence.wav"), w);
  Waveform r = load_wav(tmp.path("silence.wav"));
  EXPECT_EQ(r.sample_rate, 16000);
  ASSERT_EQ(r.samples.size(), 16000u);
  for (double s : r.samples) EXPECT_EQ(s, 0.0);
}

TEST(Wav, StereoOppositeChannelsAverageToZero) {
  TmpDir tmp;
  // Hand-built stereo file: L = +0.5, R = -0.5 for 100 frames.
  std::vector<unsigned char> bytes;
  auto u32 = [&](uint32_t x) {
    for (int i = 0; i < 4; ++i) bytes.push_back((x >> (8 * i)) & 0xff);
  };
  auto u16 = [&](uint16_t x) {
    bytes.push_back(x & 0xff);
    bytes.push_back((x >> 8) & 0xff);
  };
  const int n = 100;
  bytes.insert(bytes.end(), {'R', 'I', 'F', 'F'});
  u32(36 + n * 4);
  bytes.insert(bytes.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  u32(16);
  u16(1);
  u16(2);
  u32(16000);
  u32(16000 * 4);
  u16(4);
  u16(16);
  bytes.insert(bytes.end(), {'d', 'a', 't', 'a'});
  u32(n * 4);
  for (int i = 0; i < n; ++i) {
    u16(static_cast<uint16_t>(16384));   // +0.5
    u16(static_cast<uint16_t>(-16384));  // -0.5
  }
  std::ofstream f(tmp.path("st.wav"), std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  f.close();

  Waveform r = load_wav(tmp.path("st.wav"));
  ASSERT_EQ(r.samples.size(), 100u);
  for (double s : r.samples) EXPECT_EQ(s, 0.0);
}

TEST(Wav, ErrorsOnBadInput) {
  TmpDir tmp;
  EXPECT_THROW(load_wav(tmp.path("missing.wav")), IoError);
  std::ofstream f(tmp.path("trunc.wav"), std::ios::binary);
  f.write("RIFFxx", 6);
  f.close();
  EXPECT_THROW(load_wav(tmp.path("trunc.wav")), FormatError);
  std::ofstream g(tmp.path("noise.wav"), std::ios::binary);
  g.write("this is not audio at all, not even close", 40);
  g.close();
  EXPECT_THROW(load_wav(tmp.path("noise.wav")), FormatError);
}

TEST(Segments, UniformStartsCoverDuration) {
  Waveform w = sine(100.0, 10.0, 16000);
  auto segs = sample_segments(w, 5, 2.0);
  ASSERT_EQ(segs.size(), 5u);
  // starts {0,2,4,6,8}s: segment i must equal the raw samples there
  for (int i = 0; i < 5; ++i) {
    const size_t start = static_cast<size_t>(i) * 2 * 16000;
    ASSERT_EQ(segs[i].samples.size(), 32000u);
    for (size_t j = 0; j < 32000; j += 997) {
      EXPECT_EQ(segs[i].samples[j], w.samples[start + j]);
    }
  }
}

TEST(Segments, ShortAudioIsZeroPadded) {
  Waveform w = sine(100.0, 1.0, 16000);
  auto segs = sample_segments(w, 2, 2.0);
  ASSERT_EQ(segs.size(), 2u);
  for (const auto& s : segs) {
    ASSERT_EQ(s.samples.size(), 32000u);
    EXPECT_EQ(s.samples[0], w.samples[0]);
    for (size_t j = 16000; j < 32000; ++j) ASSERT_EQ(s.samples[j], 0.0);
  }
  // both clamp to start 0
  EXPECT_EQ(segs[0].samples[5], segs[1].samples[5]);
}

TEST(Segments, InvalidInputs) {
  Waveform w = sine(100.0, 1.0, 16000);
  EXPECT_THROW(sample_segments(w, 0), ValueError);
  Waveform empty;
  empty.sample_rate = 16000;
  EXPECT_THROW(sample_segments(empty, 2), ValueError);
}

TEST(Mel, Has128RowsByDefault) {
  AudioFrontendConfig cfg;
  Waveform seg = sine(440.0, cfg.seg_seconds, cfg.sample_rate);
  auto clip = mel_spectrogram<float>(seg, cfg);
  EXPECT_EQ(clip.mel.extent(0), 128u);
  EXPECT_EQ(clip.mel.extent(1), static_cast<size_t>(cfg.frames_per_segment()));
}

TEST(Mel, AllZeroSegmentHitsLogFloor) {
  AudioFrontendConfig cfg;
  Waveform seg;
  seg.sample_rate = cfg.sample_rate;
  seg.samples.assign(cfg.segment_samples(), 0.0);
  auto clip = mel_spectrogram<double>(seg, cfg);
  const double expect = std::log(cfg.mel.log_floor);
  for (double v : clip.mel.data()) EXPECT_DOUBLE_EQ(v, expect);
}

TEST(Mel, SineArgmaxMatchesDftOracle) {
  AudioFrontendConfig cfg;
  Waveform seg = sine(440.0, cfg.seg_seconds, cfg.sample_rate);
  auto clip = mel_spectrogram<double>(seg, cfg);
  auto oracle = oracle_argmax_rows(seg, cfg);
  const size_t n_frames = clip.mel.extent(1);
  ASSERT_EQ(oracle.size(), n_frames);

  size_t agree = 0;
  for (size_t t = 0; t < n_frames; ++t) {
    size_t best = 0;
    for (size_t m = 1; m < clip.mel.extent(0); ++m) {
      if (clip.mel.at(m, t) > clip.mel.at(best, t)) best = m;
    }
    if (best == oracle[t]) ++agree;
  }
  EXPECT_GE(agree, (n_frames * 95) / 100);

  // and that row's filter band must contain 440 Hz
  auto mel_of = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  const double hi_mel = mel_of(cfg.sample_rate / 2.0);
  const double mel_440 = mel_of(440.0);
  const double spacing = hi_mel / (cfg.mel.n_mels + 1);
  const size_t expected_row = oracle[n_frames / 2];
  const double band_lo = spacing * expected_row;        // left edge of filter
  const double band_hi = spacing * (expected_row + 2);  // right edge
  EXPECT_GT(mel_440, band_lo);
  EXPECT_LT(mel_440, band_hi);
}

TEST(Mel, ConfigErrors) {
  AudioFrontendConfig cfg;
  Waveform seg = sine(440.0, cfg.seg_seconds, cfg.sample_rate);
  AudioFrontendConfig bad = cfg;
  bad.mel.n_fft = 400;
  EXPECT_THROW(mel_spectrogram<float>(seg, bad), ConfigError);
  bad = cfg;
  bad.mel.n_mels = 0;
  EXPECT_THROW(mel_spectrogram<float>(seg, bad), ConfigError);
  bad = cfg;
  bad.mel.hop = 300;  // n_fft < 2*hop
  EXPECT_THROW(mel_spectrogram<float>(seg, bad), ConfigError);
  // wrong sample rate is an error, never a silent resample
  Waveform wrong = sine(440.0, cfg.seg_seconds, 8000);
  EXPECT_THROW(mel_spectrogram<float>(wrong, cfg), ValueError);
}

TEST(Mel, EnergyMonotoneUnderGain) {
  AudioFrontendConfig cfg;
  Waveform a = sine(523.0, cfg.seg_seconds, cfg.sample_rate, 0.4);
  Waveform b = a;
  for (auto& s : b.samples) s *= 2.0;
  auto ca = mel_spectrogram<double>(a, cfg);
  auto cb = mel_spectrogram<double>(b, cfg);
  for (size_t i = 0; i < ca.mel.numel(); ++i) {
    EXPECT_GE(cb.mel.data()[i], ca.mel.data()[i]);
  }
}

TEST(Mel, OneHopShiftMovesColumnsByOne) {
  AudioFrontendConfig cfg;
  const int hop = cfg.mel.hop;
  Waveform full = sine(330.0, cfg.seg_seconds + 1.0, cfg.sample_rate, 0.8);
  // add some structure so columns differ
  for (size_t i = 0; i < full.samples.size(); ++i) {
    full.samples[i] *= 0.5 + 0.5 * std::sin(2.0 * M_PI * i / 7000.0);
  }
  Waveform seg0, seg1;
  seg0.sample_rate = seg1.sample_rate = cfg.sample_rate;
  const size_t n = static_cast<size_t>(cfg.segment_samples());
  seg0.samples.assign(full.samples.begin(), full.samples.begin() + n);
  seg1.samples.assign(full.samples.begin() + hop, full.samples.begin() + hop + n);
  auto c0 = mel_spectrogram<double>(seg0, cfg);
  auto c1 = mel_spectrogram<double>(seg1, cfg);
  const size_t frames = c0.mel.extent(1);
  for (size_t m = 0; m < c0.mel.extent(0); m += 7) {
    for (size_t t = 1; t + 1 < frames; ++t) {
      EXPECT_NEAR(c1.mel.at(m, t - 1), c0.mel.at(m, t), 1e-5);
    }
  }
}

TEST(Mel, ShapeDependsOnlyOnConfig) {
  AudioFrontendConfig cfg;
  Waveform a = sine(440.0, cfg.seg_seconds, cfg.sample_rate);
  Waveform b = sine(123.0, cfg.seg_seconds, cfg.sample_rate, 0.1);
  auto ca = mel_spectrogram<float>(a, cfg);
  auto cb = mel_spectrogram<float>(b, cfg);
  EXPECT_EQ(ca.mel.shape(), cb.mel.shape());
}

TEST(Frontend, FullPathProducesMClips) {
  AudioFrontendConfig cfg;
  Waveform w = sine(440.0, 8.0, cfg.sample_rate, 0.6);
  auto clips = audio_to_clips<float>(w, cfg);
  ASSERT_EQ(clips.size(), 4u);
  EXPECT_DOUBLE_EQ(clips[0].segment_start, 0.0);
  EXPECT_DOUBLE_EQ(clips[1].segment_start, 2.0);
  EXPECT_DOUBLE_EQ(clips[3].segment_start, 6.0);
}
