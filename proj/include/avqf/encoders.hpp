#pragma once

#include <string>
#include <vector>

#include "avqf/audio.hpp"
#include "avqf/config.hpp"
#include "avqf/dataset.hpp"
#include "avqf/layers.hpp"

namespace avqf {

// One video frame as an H x W x C pixel grid in [0, 1].
template <typename Real>
struct FrameTensor {
  Tensor<Real> pixels;  // [H, W, C]
  int frame_index = 0;
};

// Frame representations from the frozen image encoder: [N, K_f, d_f].
template <typename Real>
struct VideoEmbedding {
  Tensor<Real> v;
  size_t n_frames = 0;
};

// Dense per-segment vectors from the frozen audio encoder: [M, d_pre].
template <typename Real>
struct AudioSegmentEmbeddings {
  Tensor<Real> a;
  size_t n_segments = 0;
};

template <typename Real>
std::vector<FrameTensor<Real>> frames_from_video(const VideoFile& vf) {
  std::vector<FrameTensor<Real>> frames;
  frames.reserve(vf.n_frames);
  const size_t fs = vf.frame_size();
  for (uint32_t n = 0; n < vf.n_frames; ++n) {
    std::vector<Real> pix(fs);
    for (size_t i = 0; i < fs; ++i) pix[i] = static_cast<Real>(vf.pixels[n * fs + i]);
    FrameTensor<Real> f;
    f.pixels = Tensor<Real>::from_data({vf.height, vf.width, vf.channels}, std::move(pix));
    f.frame_index = static_cast<int>(n);
    frames.push_back(std::move(f));
  }
  return frames;
}

// The image-as-one-frame-video rule: a still image becomes a length-1 frame
// sequence and flows through the video path unchanged.
template <typename Real>
std::vector<FrameTensor<Real>> image_as_video(const FrameTensor<Real>& img) {
  for (Real p : img.pixels.data()) {
    if (!(p >= Real(0) && p <= Real(1))) {
      throw ValueError("image_as_video: pixels must lie in [0, 1]");
    }
  }
  std::vector<FrameTensor<Real>> out;
  out.push_back(img);
  out[0].frame_index = 0;
  return out;
}

// Frozen seeded stand-in for a pretrained image encoder: patch embedding,
// K_f readout query tokens appended to the patch tokens, a couple of
// self-attention blocks, and the readout rows as output.
template <typename Real>
struct ImageEncoder {
  ImageEncoderConfig cfg;
  Linear<Real> patch_embed;    // [patch*patch*C, d_f]
  Tensor<Real> query_tokens;   // [k_f, d_f]
  Tensor<Real> pos_emb;        // [num_patches + k_f, d_f]
  std::vector<TransformerBlock<Real>> blocks;
  LayerNormParams<Real> final_ln;

  static ImageEncoder seeded(const ImageEncoderConfig& cfg, RngState rng) {
    ImageEncoder e;
    e.cfg = cfg;
    e.patch_embed = Linear<Real>::seeded(cfg.patch_dim(), cfg.d_f, rng, false);
    e.query_tokens = seeded_init<Real>({static_cast<size_t>(cfg.k_f),
                                        static_cast<size_t>(cfg.d_f)},
                                       InitScheme::kUniformScaled, rng, false);
    e.pos_emb = seeded_init<Real>({static_cast<size_t>(cfg.num_patches() + cfg.k_f),
                                   static_cast<size_t>(cfg.d_f)},
                                  InitScheme::kUniformScaled, rng, false);
    for (int i = 0; i < cfg.layers; ++i) {
      e.blocks.push_back(
          TransformerBlock<Real>::seeded(cfg.d_f, cfg.heads, cfg.d_ff, rng, false));
    }
    e.final_ln = LayerNormParams<Real>::seeded(cfg.d_f, rng, false);
    return e;
  }

  // [K_f, d_f] for one frame.
  Tensor<Real> encode_frame(const FrameTensor<Real>& f) const {
    const Shape& s = f.pixels.shape();
    if (s.size() != 3 || s[0] != static_cast<size_t>(cfg.height) ||
        s[1] != static_cast<size_t>(cfg.width) || s[2] != static_cast<size_t>(cfg.channels)) {
      throw ShapeError("encode_frame: frame " + shape_str(s) + " does not match encoder [" +
                       std::to_string(cfg.height) + "," + std::to_string(cfg.width) + "," +
                       std::to_string(cfg.channels) + "]");
    }
    const size_t ps = static_cast<size_t>(cfg.patch);
    const size_t py_n = s[0] / ps, px_n = s[1] / ps, c_n = s[2];
    const size_t pd = static_cast<size_t>(cfg.patch_dim());
    std::vector<Real> patches(py_n * px_n * pd);
    size_t w = 0;
    for (size_t py = 0; py < py_n; ++py)
      for (size_t px = 0; px < px_n; ++px)
        for (size_t dy = 0; dy < ps; ++dy)
          for (size_t dx = 0; dx < ps; ++dx)
            for (size_t c = 0; c < c_n; ++c)
              patches[w++] = f.pixels.at(py * ps + dy, px * ps + dx, c);

    Tensor<Real> tokens = patch_embed.forward(
        Tensor<Real>::from_data({py_n * px_n, pd}, std::move(patches)));
    Tensor<Real> x = add(concat<Real>({tokens, query_tokens}, 0), pos_emb);
    for (const auto& b : blocks) x = b.forward(x, false);
    x = final_ln.forward(x);
    return slice(x, 0, py_n * px_n, static_cast<size_t>(cfg.k_f));
  }

  // Stacks per-frame encodings along a leading frame axis: [N, K_f, d_f].
  // Frames are encoded independently; no cross-frame mixing happens here.
  VideoEmbedding<Real> encode_video(const std::vector<FrameTensor<Real>>& frames) const {
    if (frames.empty()) throw ValueError("encode_video: empty frame sequence");
    const size_t kf = static_cast<size_t>(cfg.k_f), df = static_cast<size_t>(cfg.d_f);
    Tensor<Real> out = Tensor<Real>::zeros({frames.size(), kf, df});
    for (size_t n = 0; n < frames.size(); ++n) {
      Tensor<Real> e = encode_frame(frames[n]);
      std::copy_n(e.data().data(), kf * df, out.data().data() + n * kf * df);
    }
    VideoEmbedding<Real> v;
    v.v = out;
    v.n_frames = frames.size();
    return v;
  }

  void collect(const std::string& prefix, NamedTensors<Real>& out) const {
    patch_embed.collect(prefix + ".patch_embed", out);
    out.emplace_back(prefix + ".query_tokens", query_tokens);
    out.emplace_back(prefix + ".pos_emb", pos_emb);
    for (size_t i = 0; i < blocks.size(); ++i) {
      blocks[i].collect(prefix + ".block" + std::to_string(i), out);
    }
    final_ln.collect(prefix + ".final_ln", out);
  }
};

// Frozen seeded stand-in for a pretrained audio encoder: each spectrogram
// clip is flattened and pushed through a two-layer perceptron. Also carries
// the frozen visual adapter that lets visual features drive the audio-side
// branch when no audio-text data is available.
template <typename Real>
struct AudioEncoder {
  AudioEncoderConfig cfg;
  size_t input_dim = 0;  // n_mels * frames_per_segment
  Linear<Real> fc1, fc2;
  Linear<Real> visual_adapter;  // [d_f, d_pre]

  static AudioEncoder seeded(const AudioEncoderConfig& cfg, const AudioFrontendConfig& fe,
                             int d_f, RngState rng) {
    AudioEncoder e;
    e.cfg = cfg;
    e.input_dim = static_cast<size_t>(fe.mel.n_mels) *
                  static_cast<size_t>(fe.frames_per_segment());
    e.fc1 = Linear<Real>::seeded(static_cast<int>(e.input_dim), cfg.hidden, rng, false);
    e.fc2 = Linear<Real>::seeded(cfg.hidden, cfg.d_pre, rng, false);
    e.visual_adapter = Linear<Real>::seeded(d_f, cfg.d_pre, rng, false);
    return e;
  }

  // [M, d_pre], one row per clip, rows independent of each other.
  AudioSegmentEmbeddings<Real> encode_segments(
      const std::vector<SpectrogramClip<Real>>& clips) const {
    if (clips.empty()) throw ValueError("encode_segments: empty clip list");
    const Shape& s0 = clips[0].mel.shape();
    for (const auto& c : clips) {
      if (c.mel.shape() != s0) throw ShapeError("encode_segments: clips differ in shape");
    }
    if (shape_numel(s0) != input_dim) {
      throw ShapeError("encode_segments: clip has " + std::to_string(shape_numel(s0)) +
                       " cells, encoder expects " + std::to_string(input_dim));
    }
    std::vector<Real> flat(clips.size() * input_dim);
    for (size_t i = 0; i < clips.size(); ++i) {
      std::copy_n(clips[i].mel.data().data(), input_dim, flat.data() + i * input_dim);
    }
    Tensor<Real> x = Tensor<Real>::from_data({clips.size(), input_dim}, std::move(flat));
    Tensor<Real> h = gelu(fc1.forward(x));
    AudioSegmentEmbeddings<Real> out;
    out.a = fc2.forward(h);
    out.n_segments = clips.size();
    return out;
  }

  // Visual-to-audio bridge: mean over the K_f vectors of each frame, then a
  // frozen linear map into the d_pre space the audio branch consumes.
  AudioSegmentEmbeddings<Real> visual_to_segments(const VideoEmbedding<Real>& v) const {
    const size_t n = v.v.extent(0), kf = v.v.extent(1), df = v.v.extent(2);
    std::vector<Real> pooled(n * df, Real(0));
    for (size_t i = 0; i < n; ++i)
      for (size_t k = 0; k < kf; ++k)
        for (size_t j = 0; j < df; ++j) pooled[i * df + j] += v.v.at(i, k, j);
    const Real inv = Real(1) / static_cast<Real>(kf);
    for (auto& p : pooled) p *= inv;
    AudioSegmentEmbeddings<Real> out;
    out.a = visual_adapter.forward(Tensor<Real>::from_data({n, df}, std::move(pooled)));
    out.n_segments = n;
    return out;
  }

  void collect(const std::string& prefix, NamedTensors<Real>& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
    visual_adapter.collect(prefix + ".visual_adapter", out);
  }
};

}  // namespace avqf
