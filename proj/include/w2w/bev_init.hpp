// BEV embedding initialization from ground features: per-pixel depth
// distribution, lift to a depth volume, height collapse, resample to the grid.
#pragma once

#include <cmath>
#include <string>

#include "w2w/ops.hpp"
#include "w2w/params.hpp"

namespace w2w {

struct BevGeometry {
  std::size_t rows = 16;
  std::size_t cols = 16;
  std::size_t windows = 4;

  std::size_t side() const { return static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(windows)))); }
  std::size_t window_rows() const { return rows / side(); }
  std::size_t window_cols() const { return cols / side(); }
  std::size_t tokens() const { return rows * cols; }

  void validate() const {
    if (rows == 0 || cols == 0) throw ConfigError("bev_rows/bev_cols must be positive");
    if (windows == 0 || side() * side() != windows) {
      throw ConfigError("windows must be a perfect square, got " + std::to_string(windows));
    }
    if (rows % side() != 0 || cols % side() != 0) {
      throw ConfigError("bev_rows/bev_cols (" + std::to_string(rows) + "x" + std::to_string(cols) +
                        ") must be divisible by sqrt(windows)=" + std::to_string(side()));
    }
  }
};

template <typename T>
struct DepthField {
  Tensor<T> probs;  // H x W x D, a distribution over D per pixel
};

template <typename T>
struct BevGrid {
  Tensor<T> tokens;  // rows x cols x C
  BevGeometry geometry;
};

enum class HeightCollapse { max, avg };

template <typename T>
DepthField<T> predict_depth(const Tensor<T>& c4, const Tensor<T>& weight, const Tensor<T>& bias) {
  return {softmax(linear(c4, weight, bias), 2)};
}

template <typename T>
Tensor<T> lift_to_3d(const Tensor<T>& c4, const DepthField<T>& depth) {
  return lift(depth.probs, c4);
}

// H x W x D x C volume -> D x W x C plane.
template <typename T>
Tensor<T> collapse_height(const Tensor<T>& volume, HeightCollapse mode = HeightCollapse::max) {
  if (volume.rank() != 4) throw DimensionError("collapse_height: expected HxWxDxC, got " + shape_str(volume.shape()));
  const Tensor<T> pooled = pool_axis(volume, 0, mode == HeightCollapse::max ? PoolMode::max : PoolMode::avg);
  return permute(pooled, {1, 0, 2});
}

// Depth axis -> BEV rows, panorama width -> BEV columns; then the learned
// positional embedding is added.
template <typename T>
BevGrid<T> resample_to_grid(const Tensor<T>& collapsed, const BevGeometry& geometry,
                            const Tensor<T>& positional) {
  geometry.validate();
  Tensor<T> plane = collapsed;
  if (collapsed.dim(0) != geometry.rows || collapsed.dim(1) != geometry.cols) {
    plane = resize_bilinear(collapsed, geometry.rows, geometry.cols);
  }
  return {add(plane, positional), geometry};
}

template <typename T>
class BevInitializer {
 public:
  BevInitializer() = default;

  BevInitializer(const BevGeometry& geometry, std::size_t channels, std::size_t depth_bins,
                 ParamStore<T>& store, Rng& rng)
      : geometry_(geometry), channels_(channels), depth_bins_(depth_bins) {
    geometry.validate();
    if (depth_bins == 0) throw ConfigError("depth_bins must be positive");
    depth_w_ = store.normal("bev_init.depth.w", {channels, depth_bins}, std::sqrt(1.0 / channels), rng);
    depth_b_ = store.zeros("bev_init.depth.b", {depth_bins});
    positional_ = store.normal("bev_init.pos", {geometry.rows, geometry.cols, channels}, 0.1, rng);
  }

  bool enabled = true;
  HeightCollapse collapse = HeightCollapse::max;

  const BevGeometry& geometry() const { return geometry_; }
  const Tensor<T>& positional() const { return positional_; }

  DepthField<T> predict_depth(const Tensor<T>& c4) const { return w2w::predict_depth(c4, depth_w_, depth_b_); }

  // Full initialization from C4; optionally exposes the depth field.
  BevGrid<T> initialize(const Tensor<T>& c4, DepthField<T>* depth_out = nullptr) const {
    if (!enabled) {
      return {add(Tensor<T>::zeros({geometry_.rows, geometry_.cols, channels_}), positional_), geometry_};
    }
    DepthField<T> depth = predict_depth(c4);
    const Tensor<T> volume = lift_to_3d(c4, depth);
    BevGrid<T> grid = resample_to_grid(collapse_height(volume, collapse), geometry_, positional_);
    if (depth_out != nullptr) *depth_out = std::move(depth);
    return grid;
  }

 private:
  BevGeometry geometry_;
  std::size_t channels_ = 0;
  std::size_t depth_bins_ = 0;
  Tensor<T> depth_w_, depth_b_, positional_;
};

}  // namespace w2w
