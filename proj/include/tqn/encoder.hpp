#pragma once

// Small temporal encoder: a kernel-3 convolution over the frames of each
// clip, GELU, mean over the clip, then a linear projection. Clips never
// share frames, so encoding a window of clips equals slicing the encoding
// of the whole sequence.

#include "tqn/nn.hpp"
#include "tqn/ops.hpp"

namespace tqn {

struct EncoderConfig {
  std::size_t input_dim = 16;   // d_in, channels per frame
  std::size_t clip_len = 4;     // frames per clip
  std::size_t kernel = 3;       // temporal kernel, within a clip
  std::size_t hidden_dim = 32;
  std::size_t feature_dim = 32;  // d

  void validate() const {
    if (input_dim < 1 || clip_len < 1 || hidden_dim < 1 || feature_dim < 1) {
      throw ConfigError("encoder: dimensions must be positive");
    }
    if (kernel < 1 || kernel > clip_len) throw ConfigError("encoder: kernel must lie in [1, clip_len]");
  }
};

struct ToyEncoder {
  EncoderConfig config;
  Linear conv;
  Linear project;

  static ToyEncoder create(ParameterSet& params, const EncoderConfig& config, Rng& rng) {
    config.validate();
    ToyEncoder e;
    e.config = config;
    e.conv = Linear::create(params, "encoder.conv", config.kernel * config.input_dim, config.hidden_dim, rng);
    e.project = Linear::create(params, "encoder.project", config.hidden_dim, config.feature_dim, rng);
    return e;
  }

  // frames: [(clips * clip_len) x input_dim] -> [clips x feature_dim]
  Tensor operator()(const Tensor& frames) const {
    if (frames.rank() != 2 || frames.cols() != config.input_dim) {
      throw ShapeError("encoder: frames must be T x " + std::to_string(config.input_dim));
    }
    const std::size_t positions = config.clip_len - config.kernel + 1;
    const Tensor h = gelu(conv(unfold_clips(frames, config.clip_len, config.kernel)));
    return project(segment_mean(h, positions));
  }

  // Encodes clips [start, start + count) of a frame matrix.
  Tensor encode_clips(const Tensor& frames, std::size_t start, std::size_t count) const {
    return (*this)(slice_rows(frames, start * config.clip_len, count * config.clip_len));
  }
};

}  // namespace tqn
