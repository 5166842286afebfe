// Window partitions and the context-aware window matching rule: each BEV
// window is assigned, per pyramid level, the ground strip whose pooled
// descriptor has the largest dot product with its own.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "w2w/backbone.hpp"
#include "w2w/bev_init.hpp"

namespace w2w {

enum class WindowSource { bev, ground };

// Index sets into a row-major token map. Windows tile the map exactly.
struct WindowSet {
  WindowSource source = WindowSource::bev;
  std::size_t level = 0;  // pyramid level 0..3 for ground strips
  std::size_t map_rows = 0, map_cols = 0;
  std::size_t window_rows = 0, window_cols = 0;
  std::vector<std::vector<std::size_t>> windows;  // flat token indices, raster order

  std::size_t count() const { return windows.size(); }
};

struct WindowAssignment {
  std::size_t windows = 0;
  // match[i][l]: ground strip for BEV window i at level l.
  std::vector<std::array<std::size_t, 4>> match;
  // scores[l][i * windows + j] = <Avg(BEV window i), Avg(ground strip j at level l)>.
  std::array<std::vector<double>, 4> scores;

  double score(std::size_t level, std::size_t i, std::size_t j) const { return scores[level][i * windows + j]; }
};

namespace detail {

inline WindowSet tile(WindowSource source, std::size_t level, std::size_t rows, std::size_t cols,
                      std::size_t wr, std::size_t wc) {
  WindowSet set;
  set.source = source;
  set.level = level;
  set.map_rows = rows;
  set.map_cols = cols;
  set.window_rows = wr;
  set.window_cols = wc;
  for (std::size_t by = 0; by < rows / wr; ++by)
    for (std::size_t bx = 0; bx < cols / wc; ++bx) {
      std::vector<std::size_t> idx;
      idx.reserve(wr * wc);
      for (std::size_t y = by * wr; y < (by + 1) * wr; ++y)
        for (std::size_t x = bx * wc; x < (bx + 1) * wc; ++x) idx.push_back(y * cols + x);
      set.windows.push_back(std::move(idx));
    }
  return set;
}

}  // namespace detail

// Row-major grid of N windows of (rows/sqrt(N)) x (cols/sqrt(N)) tokens.
inline WindowSet partition_bev(const BevGeometry& geometry) {
  geometry.validate();
  return detail::tile(WindowSource::bev, 0, geometry.rows, geometry.cols, geometry.window_rows(),
                      geometry.window_cols());
}

// N full-height vertical strips of one H x W map, left to right.
inline WindowSet partition_ground_level(std::size_t rows, std::size_t cols, std::size_t windows,
                                        std::size_t level) {
  if (windows == 0 || cols % windows != 0) {
    throw ConfigError("ground level C" + std::to_string(level + 1) + " width " + std::to_string(cols) +
                      " is not divisible by windows=" + std::to_string(windows));
  }
  return detail::tile(WindowSource::ground, level, rows, cols, rows, cols / windows);
}

template <typename T>
std::array<WindowSet, 4> partition_ground(const Pyramid<T>& pyramid, std::size_t windows) {
  std::array<WindowSet, 4> sets;
  for (std::size_t l = 0; l < 4; ++l) {
    const auto& m = pyramid.levels[l];
    sets[l] = partition_ground_level(m.dim(0), m.dim(1), windows, l);
  }
  return sets;
}

// Mean token of each window, accumulated in raster order at double precision.
template <typename T>
std::vector<std::vector<double>> pooled_descriptors(const Tensor<T>& map, const WindowSet& set) {
  const std::size_t c = map.shape().back();
  std::vector<std::vector<double>> out;
  out.reserve(set.count());
  for (const auto& win : set.windows) {
    std::vector<double> d(c, 0.0);
    for (std::size_t t : win)
      for (std::size_t ch = 0; ch < c; ++ch) d[ch] += static_cast<double>(map[t * c + ch]);
    for (auto& v : d) v /= static_cast<double>(win.size());
    out.push_back(std::move(d));
  }
  return out;
}

// Hard assignment; reads values only, never records on the tape.
template <typename T>
WindowAssignment match_windows(const Tensor<T>& bev_tokens, const WindowSet& bev,
                               const Pyramid<T>& pyramid, const std::array<WindowSet, 4>& ground) {
  const std::size_t n = bev.count();
  WindowAssignment a;
  a.windows = n;
  a.match.assign(n, {0, 0, 0, 0});
  const auto bev_desc = pooled_descriptors(bev_tokens, bev);
  for (std::size_t l = 0; l < 4; ++l) {
    if (ground[l].count() != n) {
      throw DimensionError("match_windows: level C" + std::to_string(l + 1) + " has " +
                           std::to_string(ground[l].count()) + " strips, BEV has " + std::to_string(n) +
                           " windows");
    }
    const auto strip_desc = pooled_descriptors(pyramid.levels[l], ground[l]);
    auto& scores = a.scores[l];
    scores.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t ch = 0; ch < bev_desc[i].size(); ++ch) s += bev_desc[i][ch] * strip_desc[j][ch];
        scores[i * n + j] = s;
        if (s > scores[i * n + best]) best = j;
      }
      a.match[i][l] = best;
    }
  }
  return a;
}

}  // namespace w2w
