#include <gtest/gtest.h>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace w2w;
using w2w::tst::rand_tensor;

namespace {

Pyramid<double> random_pyramid(Rng& rng, std::size_t c) {
  Pyramid<double> p;
  for (std::size_t l = 0; l < 4; ++l) p.levels[l] = rand_tensor(rng, {std::size_t{1} << l, std::size_t{4} << l, c});
  return p;
}

Pyramid<double> roll_strips(const Pyramid<double>& p, std::size_t strips, std::size_t windows) {
  Pyramid<double> out;
  for (std::size_t l = 0; l < 4; ++l)
    out.levels[l] = roll_width(p.levels[l], static_cast<long>(strips * p.levels[l].dim(1) / windows));
  return out;
}

EncoderConfig small_config(std::size_t blocks = 2) {
  EncoderConfig c;
  c.num_blocks = blocks;
  c.num_heads = 2;
  c.ffn_expansion = 2;
  c.geometry = {4, 4, 4};
  return c;
}

}  // namespace

TEST(Encoder, MultiHeadAttentionIsProjectedAttention) {
  ParamStore<double> store;
  Rng rng(1);
  const auto p = AttentionParams<double>::create("a", 6, store, rng);
  const auto q = rand_tensor(rng, {3, 6}), kv = rand_tensor(rng, {5, 6});
  // Compose by hand: per-head softmax(QK^T/sqrt(d)) V, concat, output projection.
  const auto Q = linear(q, p.wq, p.bq), K = linear(kv, p.wk, p.bk), V = linear(kv, p.wv, p.bv);
  std::vector<double> concat(3 * 6, 0.0);
  for (std::size_t h = 0; h < 3; ++h)
    for (std::size_t i = 0; i < 3; ++i) {
      std::vector<double> s(5);
      double z = 0.0;
      for (std::size_t j = 0; j < 5; ++j) {
        double d = 0.0;
        for (std::size_t t = 0; t < 2; ++t) d += Q[i * 6 + h * 2 + t] * K[j * 6 + h * 2 + t];
        s[j] = std::exp(d / std::sqrt(2.0));
        z += s[j];
      }
      for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t j = 0; j < 5; ++j) concat[i * 6 + h * 2 + t] += s[j] / z * V[j * 6 + h * 2 + t];
    }
  const auto want = linear(Tensor<double>({3, 6}, concat), p.wo, p.bo);
  EXPECT_LT(max_abs_diff(multi_head_attention(q, kv, p, 3), want), 1e-12);
}

TEST(Encoder, CrossAttentionSumsLevelsPerMatchedStrip) {
  // Hand composition for window 0: sum over levels of MHA(window tokens,
  // tokens of its matched strip), scattered back to raster order, then LN.
  ParamStore<double> store;
  Rng rng(2);
  const std::size_t c = 4;
  const auto p = AttentionParams<double>::create("x", c, store, rng);
  const auto norm = NormParams<double>::create("n", c, store);
  const auto pyr = random_pyramid(rng, c);
  const auto tokens = rand_tensor(rng, {16, c});
  const auto bev = partition_bev({4, 4, 4});
  const auto ground = partition_ground(pyr, 4);
  const auto a = match_windows(tokens, bev, pyr, ground);
  const auto out = w2w_cross_attention(tokens, bev, pyr, ground, a, p, norm, 2);

  std::vector<double> attended(16 * c, 0.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t l = 0; l < 4; ++l) {
      const auto lvl = reshape(pyr.levels[l], {pyr.levels[l].size() / c, c});
      const auto o = multi_head_attention(gather_rows(tokens, bev.windows[i]),
                                          gather_rows(lvl, ground[l].windows[a.match[i][l]]), p, 2);
      for (std::size_t r = 0; r < bev.windows[i].size(); ++r)
        for (std::size_t ch = 0; ch < c; ++ch) attended[bev.windows[i][r] * c + ch] += o[r * c + ch];
    }
  const auto want = norm.apply(add(tokens, Tensor<double>({16, c}, attended)));
  EXPECT_LT(max_abs_diff(out, want), 1e-12);
}

TEST(Encoder, OutputShapeAndZeroBlocksIsIdentity) {
  ParamStore<double> store;
  Rng rng(3);
  const BevEncoder<double> enc(small_config(), 4, store, rng);
  const auto pyr = random_pyramid(rng, 4);
  const BevGrid<double> grid{rand_tensor(rng, {4, 4, 4}), {4, 4, 4}};
  EXPECT_EQ(enc.encode(grid, pyr).shape(), (Shape{4, 4, 4}));
  ParamStore<double> store0;
  const BevEncoder<double> none(small_config(0), 4, store0, rng);
  EXPECT_EQ(max_abs_diff(none.encode(grid, pyr), grid.tokens), 0.0);
  EXPECT_THROW(enc.encode({rand_tensor(rng, {4, 8, 4}), {4, 8, 4}}, pyr), DimensionError);
}

TEST(Encoder, HeadsMustDivideChannels) {
  ParamStore<double> store;
  Rng rng(4);
  auto cfg = small_config();
  cfg.num_heads = 3;
  EXPECT_THROW(BevEncoder<double>(cfg, 4, store, rng), ConfigError);
}

TEST(Encoder, RollingEveryLevelByOneStripLeavesBevUnchanged) {
  ParamStore<double> store;
  Rng rng(5);
  const BevEncoder<double> enc(small_config(2), 4, store, rng);
  for (int rep = 0; rep < 10; ++rep) {
    const auto pyr = random_pyramid(rng, 4);
    const BevGrid<double> grid{rand_tensor(rng, {4, 4, 4}), {4, 4, 4}};
    EncoderTrace ta, tb;
    const auto a = enc.encode(grid, pyr, &ta);
    const auto b = enc.encode(grid, roll_strips(pyr, 1, 4), &tb);
    EXPECT_LE(max_abs_diff(a, b), 1e-12);
    for (std::size_t blk = 0; blk < 2; ++blk)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t l = 0; l < 4; ++l)
          EXPECT_EQ(tb.blocks[blk].assignment.match[i][l], (ta.blocks[blk].assignment.match[i][l] + 1) % 4);
  }
}

TEST(Encoder, TraceCapturesAttentionDistributions) {
  ParamStore<double> store;
  Rng rng(6);
  const BevEncoder<double> enc(small_config(1), 4, store, rng);
  const auto pyr = random_pyramid(rng, 4);
  EncoderTrace t;
  enc.encode({rand_tensor(rng, {4, 4, 4}), {4, 4, 4}}, pyr, &t);
  ASSERT_EQ(t.blocks.size(), 1u);
  const auto& b = t.blocks[0];
  ASSERT_EQ(b.cross.size(), 4u);
  // level 3 strip: 8 rows x 32/4 cols
  EXPECT_EQ(b.cross[0][3].queries, 4u);
  EXPECT_EQ(b.cross[0][3].keys, 64u);
  EXPECT_EQ(b.self.queries, 16u);
  for (std::size_t q = 0; q < 16; ++q) {
    double s = 0.0;
    for (std::size_t k = 0; k < 16; ++k) s += b.self.weights[q * 16 + k];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}
