#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "w2w/model.hpp"

using namespace w2w;

namespace {

ModelConfig tiny() {
  ModelConfig m;
  m.model_channels = 8;
  m.depth_bins = 4;
  m.embed_dim = 8;
  m.backbone_channels = {4, 4, 6, 8};
  m.encoder.num_blocks = 1;
  m.encoder.num_heads = 2;
  m.encoder.ffn_expansion = 2;
  m.encoder.geometry = {4, 4, 4};
  return m;
}

WorldConfig tiny_world() {
  WorldConfig w;
  w.pano_height = 16;
  w.pano_width = 64;
  w.aerial_size = 32;
  w.range_max = 14.0;
  w.footprint_min = 1.5;
  w.footprint_max = 2.5;
  w.landmarks = 4;
  return w;
}

std::vector<float> flat_params(const ParamStore<float>& p) {
  std::vector<float> out;
  for (const auto& [n, t] : p.entries()) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

}  // namespace

TEST(Schedule, CosineEndpointsAndMidpoint) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
  EXPECT_DOUBLE_EQ(cosine_lr(100, 100, 1e-3, 1e-5), 1e-5);
  EXPECT_NEAR(cosine_lr(50, 100, 1e-3, 1e-5), 0.5 * (1e-3 + 1e-5), 1e-15);
  for (std::size_t s = 1; s <= 100; ++s) EXPECT_LE(cosine_lr(s, 100, 1e-3, 1e-5), cosine_lr(s - 1, 100, 1e-3, 1e-5));
}

TEST(AdamW, SingleStepMatchesScalarFormula) {
  ParamStore<double> store;
  auto w = store.add("w", Tensor<double>({3}, {0.5, -1.0, 2.0}));
  w.mutable_grad()[0] = 0.1;
  w.mutable_grad()[1] = -0.3;
  w.mutable_grad()[2] = 0.0;
  AdamW<double> opt(store, {0.9, 0.999, 1e-8, 0.01});
  opt.step(store, 0.01);
  const double g[3] = {0.1, -0.3, 0.0}, w0[3] = {0.5, -1.0, 2.0};
  for (int i = 0; i < 3; ++i) {
    const double m = 0.1 * g[i] / 0.1, v = 0.001 * g[i] * g[i] / 0.001;
    const double want = w0[i] * (1 - 0.01 * 0.01) - 0.01 * m / (std::sqrt(v) + 1e-8);
    EXPECT_NEAR(w[i], want, 1e-15);
  }
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamW, WeightDecayIsDecoupled) {
  ParamStore<double> store;
  auto w = store.add("w", Tensor<double>({1}, {2.0}));
  AdamW<double> opt(store, {0.9, 0.999, 1e-8, 0.1});
  opt.step(store, 0.5);  // no gradient at all: pure decay
  EXPECT_DOUBLE_EQ(w[0], 2.0 * (1 - 0.5 * 0.1));
}

TEST(Model, PrepareGroundPadsCropsToWindowMultiple) {
  Image crop(32, 32, 3, 200);
  auto [t, pad] = prepare_ground<float>({crop, false}, 4);
  EXPECT_EQ(t.shape(), (Shape{32, 64, 3}));
  EXPECT_EQ(pad, Padding::zero);
  EXPECT_FLOAT_EQ(t[(0 * 64 + 31) * 3], 200.0f / 255.0f - 0.5f);
  EXPECT_EQ(t[(0 * 64 + 32) * 3], 0.0f);
  Image full(32, 128, 3);
  EXPECT_EQ(prepare_ground<float>({full, true}, 4).second, Padding::circular_width);
  EXPECT_THROW(prepare_ground<float>({Image(32, 100, 3), true}, 4), ConfigError);
  EXPECT_THROW(prepare_ground<float>({Image(30, 64, 3), false}, 4), ConfigError);
}

TEST(Model, EmbeddingsAreUnitVectors) {
  const W2WModel<float> model(tiny(), 1);
  const auto ds = make_dataset(4, {1.0, 0.0, 0.0}, 2, tiny_world());
  const auto g = model.embed_ground({ds.train[0].pano, true});
  const auto a = model.embed_aerial(ds.train[0].aerial);
  ASSERT_EQ(g.shape(), (Shape{1, 8}));
  double sg = 0, sa = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    sg += g[i] * g[i];
    sa += a[i] * a[i];
  }
  EXPECT_NEAR(sg, 1.0, 1e-5);
  EXPECT_NEAR(sa, 1.0, 1e-5);
}

TEST(Model, SharedBackboneHasFewerParameters) {
  auto cfg = tiny();
  const W2WModel<float> separate(cfg, 1);
  cfg.shared_backbone = true;
  const W2WModel<float> shared(cfg, 1);
  EXPECT_LT(shared.params().size(), separate.params().size());
  EXPECT_FALSE(shared.params().contains("aerial.stage1.down.w"));
}

TEST(Model, BatchesArePureFunctionsOfSeedAndStep) {
  const auto ds = make_dataset(8, {1.0, 0.0, 0.0}, 3, tiny_world());
  const auto a = make_batch(ds.train, 4, 90.0, 5, 7), b = make_batch(ds.train, 4, 90.0, 5, 7);
  const auto c = make_batch(ds.train, 4, 90.0, 5, 8);
  bool differs = false;
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a[i].ground.image, b[i].ground.image);
    EXPECT_EQ(a[i].ground.image.width, 16u);
    differs = differs || !(a[i].ground.image == c[i].ground.image);
  }
  EXPECT_TRUE(differs);
  EXPECT_THROW(make_batch(ds.train, 9, 90.0, 5, 0), ConfigError);
}

TEST(Training, IdenticalStepsFromIdenticalStateAreIdentical) {
  const auto ds = make_dataset(8, {1.0, 0.0, 0.0}, 4, tiny_world());
  std::vector<float> results[2];
  for (auto& r : results) {
    W2WModel<float> model(tiny(), 11);
    AdamW<float> opt(model.params(), {});
    for (std::size_t s = 0; s < 2; ++s) train_step(model, make_batch(ds.train, 4, 90.0, 1, s), opt, 1e-3, 0.05f);
    r = flat_params(model.params());
  }
  EXPECT_EQ(results[0], results[1]);
}

TEST(Training, FiveStepLossTrajectoryGolden) {
  const auto ds = make_dataset(8, {1.0, 0.0, 0.0}, 4, tiny_world());
  W2WModel<float> model(tiny(), 11);
  AdamW<float> opt(model.params(), {});
  std::vector<double> losses;
  for (std::size_t s = 0; s < 5; ++s)
    losses.push_back(train_step(model, make_batch(ds.train, 4, 90.0, 1, s), opt, cosine_lr(s, 5, 1e-2, 1e-4), 0.05f));
  const std::vector<double> golden{1.48807037, 1.38377321, 1.40240300, 1.38911903, 1.39205468};
  ASSERT_EQ(losses.size(), golden.size());
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(losses[i], golden[i], 1e-4) << "step " << i;
}

TEST(Training, NonFiniteLossAbortsWithParameterNorms) {
  const auto ds = make_dataset(4, {1.0, 0.0, 0.0}, 4, tiny_world());
  W2WModel<float> model(tiny(), 1);
  Tensor<float> w = model.params().get("head.ground.w");
  w.mutable_data()[0] = std::nanf("");
  AdamW<float> opt(model.params(), {});
  try {
    train_step(model, make_batch(ds.train, 2, 360.0, 1, 0), opt, 1e-3, 0.05f);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("head.ground.w |w|="), std::string::npos);
  }
}

TEST(Evaluation, TrainedOnNothingStillRanksEveryQuery) {
  const auto ds = make_dataset(6, {0.0, 0.0, 1.0}, 5, tiny_world());
  const W2WModel<float> model(tiny(), 2);
  const auto refs = embed_aerials(model, ds.test);
  const auto r = evaluate_retrieval(model, ds.test, refs, 90.0, 3);
  EXPECT_EQ(r.queries, 6u);
  EXPECT_EQ(r.hits.back(), 6u);  // k=10 > 6 references
  const auto again = evaluate_retrieval(model, ds.test, refs, 90.0, 3);
  EXPECT_EQ(again.ranking, r.ranking);
}
