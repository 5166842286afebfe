// Four-stage convolutional feature extractor with top-down multi-scale fusion.
#pragma once

#include <array>
#include <cmath>
#include <string>

#include "w2w/ops.hpp"
#include "w2w/params.hpp"

namespace w2w {

inline constexpr std::size_t kPyramidLevels = 4;
inline constexpr std::size_t kInputDivisor = 16;

struct BackboneConfig {
  std::array<std::size_t, 4> stage_channels{16, 24, 32, 48};
  std::size_t model_channels = 32;
  std::size_t input_channels = 3;
};

// Stage S_k has stride 2^k.
template <typename T>
struct Stages {
  std::array<Tensor<T>, 4> maps;
};

// Fused levels C1..C4: C1 is the coarsest (stride 16), C4 the finest (stride 2).
template <typename T>
struct Pyramid {
  static constexpr std::array<std::size_t, 4> strides{16, 8, 4, 2};
  std::array<Tensor<T>, 4> levels;

  std::size_t channels() const { return levels[0].dim(2); }
  const Tensor<T>& finest() const { return levels[3]; }
};

template <typename T>
class Backbone {
 public:
  Backbone() = default;

  Backbone(const std::string& prefix, const BackboneConfig& config, ParamStore<T>& store, Rng& rng)
      : config_(config) {
    std::size_t cin = config.input_channels;
    for (std::size_t s = 0; s < 4; ++s) {
      const std::size_t c = config.stage_channels[s];
      const std::string p = prefix + ".stage" + std::to_string(s + 1);
      auto& st = stages_[s];
      st.down_w = store.normal(p + ".down.w", {3, 3, cin, c}, std::sqrt(2.0 / (9.0 * cin)), rng);
      st.down_b = store.zeros(p + ".down.b", {c});
      st.conv_w = store.normal(p + ".conv.w", {3, 3, c, c}, std::sqrt(2.0 / (9.0 * c)), rng);
      st.conv_b = store.zeros(p + ".conv.b", {c});
      const std::string l = prefix + ".lateral" + std::to_string(s + 1);
      lateral_w_[s] = store.normal(l + ".w", {c, config.model_channels}, std::sqrt(1.0 / c), rng);
      lateral_b_[s] = store.zeros(l + ".b", {config.model_channels});
      cin = c;
    }
  }

  const BackboneConfig& config() const { return config_; }

  // Test hook: replaces max(0, x) with the identity so the network is affine.
  bool bypass_nonlinearity = false;

  Stages<T> extract_stages(const Tensor<T>& image, Padding padding) const {
    if (image.rank() != 3 || image.dim(2) != config_.input_channels) {
      throw DimensionError("backbone: expected HxWx" + std::to_string(config_.input_channels) +
                           " image, got " + shape_str(image.shape()));
    }
    if (image.dim(0) % kInputDivisor != 0 || image.dim(1) % kInputDivisor != 0) {
      throw ConfigError("backbone: image " + shape_str(image.shape()) +
                        " must have height and width divisible by 16");
    }
    Stages<T> out;
    Tensor<T> x = image;
    for (std::size_t s = 0; s < 4; ++s) {
      const auto& st = stages_[s];
      x = activate(conv2d(x, st.down_w, &st.down_b, 2, padding));
      x = activate(conv2d(x, st.conv_w, &st.conv_b, 1, padding));
      out.maps[s] = x;
    }
    return out;
  }

  Pyramid<T> fuse_topdown(const Stages<T>& stages) const {
    Pyramid<T> p;
    p.levels[0] = project(stages.maps[3], 3);
    for (std::size_t l = 1; l < 4; ++l) {
      const Tensor<T> up = upsample2x(p.levels[l - 1]);
      const Tensor<T> lateral = project(stages.maps[3 - l], 3 - l);
      if (up.shape() != lateral.shape()) {
        throw DimensionError("fuse_topdown: level " + std::to_string(l + 1) + " lateral " +
                             shape_str(lateral.shape()) + " vs upsampled " + shape_str(up.shape()));
      }
      p.levels[l] = add(lateral, up);
    }
    return p;
  }

  Pyramid<T> forward(const Tensor<T>& image, Padding padding) const {
    return fuse_topdown(extract_stages(image, padding));
  }

  // Aerial branch output: the finest fused map (stride 2), zero padded.
  Tensor<T> encode_aerial(const Tensor<T>& image) const { return forward(image, Padding::zero).finest(); }

 private:
  struct StageParams {
    Tensor<T> down_w, down_b, conv_w, conv_b;
  };

  Tensor<T> activate(const Tensor<T>& x) const { return bypass_nonlinearity ? x : relu(x); }
  Tensor<T> project(const Tensor<T>& stage, std::size_t s) const {
    return linear(stage, lateral_w_[s], lateral_b_[s]);
  }

  BackboneConfig config_;
  std::array<StageParams, 4> stages_;
  std::array<Tensor<T>, 4> lateral_w_, lateral_b_;
};

}  // namespace w2w
