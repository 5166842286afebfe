// Stacked BEV encoder blocks: window-to-window cross-attention over the four
// pyramid levels, global self-attention, and a feed-forward sublayer. Each
// sublayer is wrapped as layer_norm(x + sublayer(x)).
#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "w2w/bev_init.hpp"
#include "w2w/ops.hpp"
#include "w2w/params.hpp"
#include "w2w/window_matching.hpp"

namespace w2w {

struct EncoderConfig {
  std::size_t num_blocks = 3;
  std::size_t num_heads = 4;
  std::size_t ffn_expansion = 4;
  BevGeometry geometry{16, 16, 4};

  void validate(std::size_t channels) const {
    geometry.validate();
    if (num_heads == 0 || channels % num_heads != 0) {
      throw ConfigError("num_heads=" + std::to_string(num_heads) + " must divide model_channels=" +
                        std::to_string(channels));
    }
    if (ffn_expansion == 0) throw ConfigError("ffn_expansion must be positive");
  }
};

template <typename T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;

  static AttentionParams create(const std::string& prefix, std::size_t c, ParamStore<T>& store, Rng& rng) {
    const double s = std::sqrt(1.0 / static_cast<double>(c));
    AttentionParams p;
    p.wq = store.normal(prefix + ".q.w", {c, c}, s, rng);
    p.bq = store.zeros(prefix + ".q.b", {c});
    p.wk = store.normal(prefix + ".k.w", {c, c}, s, rng);
    p.bk = store.zeros(prefix + ".k.b", {c});
    p.wv = store.normal(prefix + ".v.w", {c, c}, s, rng);
    p.bv = store.zeros(prefix + ".v.b", {c});
    p.wo = store.normal(prefix + ".o.w", {c, c}, s, rng);
    p.bo = store.zeros(prefix + ".o.b", {c});
    return p;
  }
};

template <typename T>
struct NormParams {
  Tensor<T> gain, shift;

  static NormParams create(const std::string& prefix, std::size_t c, ParamStore<T>& store) {
    return {store.ones(prefix + ".gain", {c}), store.zeros(prefix + ".shift", {c})};
  }
  Tensor<T> apply(const Tensor<T>& x) const { return layer_norm(x, gain, shift); }
};

template <typename T>
struct FfnParams {
  Tensor<T> w1, b1, w2, b2;

  static FfnParams create(const std::string& prefix, std::size_t c, std::size_t expansion,
                          ParamStore<T>& store, Rng& rng) {
    const std::size_t hidden = c * expansion;
    return {store.normal(prefix + ".fc1.w", {c, hidden}, std::sqrt(2.0 / c), rng),
            store.zeros(prefix + ".fc1.b", {hidden}),
            store.normal(prefix + ".fc2.w", {hidden, c}, std::sqrt(1.0 / hidden), rng),
            store.zeros(prefix + ".fc2.b", {c})};
  }
};

template <typename T>
struct EncoderBlockParams {
  AttentionParams<T> cross;
  NormParams<T> cross_norm;
  AttentionParams<T> self;
  NormParams<T> self_norm;
  FfnParams<T> ffn;
  NormParams<T> ffn_norm;
};

// Head-averaged attention weights captured for inspection.
struct AttentionMap {
  std::size_t queries = 0, keys = 0;
  std::vector<double> weights;  // queries x keys
};

struct BlockTrace {
  WindowAssignment assignment;
  // cross[i][l]: BEV window i attending to its matched strip at level l.
  std::vector<std::array<AttentionMap, 4>> cross;
  AttentionMap self;
};

struct EncoderTrace {
  std::vector<BlockTrace> blocks;
};

namespace detail {

template <typename T>
AttentionMap head_average(const std::vector<T>& weights, std::size_t heads, std::size_t n, std::size_t m) {
  AttentionMap map{n, m, std::vector<double>(n * m, 0.0)};
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n * m; ++i) map.weights[i] += static_cast<double>(weights[h * n * m + i]) / heads;
  return map;
}

inline std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& order) {
  std::vector<std::size_t> inv(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) inv[order[i]] = i;
  return inv;
}

}  // namespace detail

// MultiHead(Q, K, V) = Concat(head_1..head_h) W^O with head_i computed on the
// projected tokens.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q_tokens, const Tensor<T>& kv_tokens,
                               const AttentionParams<T>& p, std::size_t heads,
                               std::vector<T>* weights_out = nullptr) {
  const Tensor<T> q = linear(q_tokens, p.wq, p.bq);
  const Tensor<T> k = linear(kv_tokens, p.wk, p.bk);
  const Tensor<T> v = linear(kv_tokens, p.wv, p.bv);
  return linear(attention(q, k, v, heads, weights_out), p.wo, p.bo);
}

// For every BEV window i: sum over levels l of MultiHead(W_i, C^l_{match[i][l]}),
// then residual and layer norm. Tokens are [rows*cols x C].
template <typename T>
Tensor<T> w2w_cross_attention(const Tensor<T>& bev_tokens, const WindowSet& bev,
                              const Pyramid<T>& pyramid, const std::array<WindowSet, 4>& ground,
                              const WindowAssignment& assignment, const AttentionParams<T>& p,
                              const NormParams<T>& norm, std::size_t heads,
                              BlockTrace* trace = nullptr) {
  const std::size_t n = bev.count();
  if (assignment.match.size() != n) {
    throw std::logic_error("w2w_cross_attention: assignment does not cover the BEV windows");
  }
  std::vector<std::size_t> order;
  for (const auto& win : bev.windows) order.insert(order.end(), win.begin(), win.end());
  const auto to_raster = detail::inverse_permutation(order);

  const Tensor<T> q_all = linear(bev_tokens, p.wq, p.bq);
  std::vector<Tensor<T>> q_win;
  q_win.reserve(n);
  for (const auto& win : bev.windows) q_win.push_back(gather_rows(q_all, win));
  if (trace != nullptr) trace->cross.assign(n, {});

  Tensor<T> total;
  for (std::size_t l = 0; l < 4; ++l) {
    const Tensor<T>& level = pyramid.levels[l];
    const std::size_t c = level.shape().back();
    const Tensor<T> tokens = reshape(level, {level.size() / c, c});
    const Tensor<T> k_all = linear(tokens, p.wk, p.bk);
    const Tensor<T> v_all = linear(tokens, p.wv, p.bv);
    std::map<std::size_t, std::pair<Tensor<T>, Tensor<T>>> strips;
    std::vector<Tensor<T>> outs;
    outs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = assignment.match[i][l];
      if (j >= ground[l].count()) throw std::logic_error("w2w_cross_attention: strip index out of range");
      auto it = strips.find(j);
      if (it == strips.end()) {
        it = strips.emplace(j, std::make_pair(gather_rows(k_all, ground[l].windows[j]),
                                              gather_rows(v_all, ground[l].windows[j])))
                 .first;
      }
      std::vector<T> weights;
      outs.push_back(attention(q_win[i], it->second.first, it->second.second, heads,
                               trace != nullptr ? &weights : nullptr));
      if (trace != nullptr) {
        trace->cross[i][l] = detail::head_average(weights, heads, q_win[i].dim(0), it->second.first.dim(0));
      }
    }
    const Tensor<T> projected = linear(gather_rows(concat_rows(outs), to_raster), p.wo, p.bo);
    total = l == 0 ? projected : add(total, projected);
  }
  return norm.apply(add(bev_tokens, total));
}

// Queries from every window against all BEV tokens.
template <typename T>
Tensor<T> bev_self_attention(const Tensor<T>& tokens, const AttentionParams<T>& p, const NormParams<T>& norm,
                             std::size_t heads, BlockTrace* trace = nullptr) {
  std::vector<T> weights;
  const Tensor<T> attended = multi_head_attention(tokens, tokens, p, heads, trace != nullptr ? &weights : nullptr);
  if (trace != nullptr) trace->self = detail::head_average(weights, heads, tokens.dim(0), tokens.dim(0));
  return norm.apply(add(tokens, attended));
}

template <typename T>
Tensor<T> ffn(const Tensor<T>& tokens, const FfnParams<T>& p, const NormParams<T>& norm) {
  const Tensor<T> hidden = relu(linear(tokens, p.w1, p.b1));
  return norm.apply(add(tokens, linear(hidden, p.w2, p.b2)));
}

template <typename T>
class BevEncoder {
 public:
  BevEncoder() = default;

  BevEncoder(const EncoderConfig& config, std::size_t channels, ParamStore<T>& store, Rng& rng)
      : config_(config), channels_(channels) {
    config.validate(channels);
    for (std::size_t b = 0; b < config.num_blocks; ++b) {
      const std::string p = "encoder.block" + std::to_string(b);
      EncoderBlockParams<T> block;
      block.cross = AttentionParams<T>::create(p + ".cross", channels, store, rng);
      block.cross_norm = NormParams<T>::create(p + ".cross_norm", channels, store);
      block.self = AttentionParams<T>::create(p + ".self", channels, store, rng);
      block.self_norm = NormParams<T>::create(p + ".self_norm", channels, store);
      block.ffn = FfnParams<T>::create(p + ".ffn", channels, config.ffn_expansion, store, rng);
      block.ffn_norm = NormParams<T>::create(p + ".ffn_norm", channels, store);
      blocks_.push_back(std::move(block));
    }
  }

  const EncoderConfig& config() const { return config_; }
  const std::vector<EncoderBlockParams<T>>& blocks() const { return blocks_; }

  // Runs every block on the grid; the window assignment is recomputed per block
  // from the current BEV tokens. Returns rows x cols x C.
  Tensor<T> encode(const BevGrid<T>& grid, const Pyramid<T>& pyramid, EncoderTrace* trace = nullptr) const {
    const auto& g = config_.geometry;
    if (grid.tokens.rank() != 3 || grid.tokens.dim(0) != g.rows || grid.tokens.dim(1) != g.cols ||
        grid.tokens.dim(2) != channels_) {
      throw DimensionError("encode: grid " + shape_str(grid.tokens.shape()) + " does not match the encoder");
    }
    if (blocks_.empty()) return grid.tokens;
    const WindowSet bev = partition_bev(g);
    const auto ground = partition_ground(pyramid, g.windows);
    Tensor<T> x = reshape(grid.tokens, {g.tokens(), channels_});
    if (trace != nullptr) trace->blocks.assign(blocks_.size(), {});
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const auto& blk = blocks_[b];
      BlockTrace* bt = trace != nullptr ? &trace->blocks[b] : nullptr;
      const WindowAssignment assignment = match_windows(x, bev, pyramid, ground);
      x = w2w_cross_attention(x, bev, pyramid, ground, assignment, blk.cross, blk.cross_norm,
                              config_.num_heads, bt);
      x = bev_self_attention(x, blk.self, blk.self_norm, config_.num_heads, bt);
      x = ffn(x, blk.ffn, blk.ffn_norm);
      if (bt != nullptr) bt->assignment = assignment;
    }
    return reshape(x, {g.rows, g.cols, channels_});
  }

 private:
  EncoderConfig config_;
  std::size_t channels_ = 0;
  std::vector<EncoderBlockParams<T>> blocks_;
};

}  // namespace w2w
