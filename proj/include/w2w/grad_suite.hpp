// The full gradient suite: every differentiable op plus the end-to-end
// contrastive loss of a tiny model, each checked against central differences.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "w2w/bev_encoder.hpp"
#include "w2w/grad_check.hpp"
#include "w2w/metric.hpp"
#include "w2w/model.hpp"

namespace w2w {

struct GradSuiteOptions {
  GradCheckOptions check;
  // Probe budgets per input tensor for the two composite checks.
  std::size_t model_probes = 2;
  std::size_t cross_probes = 16;
};

namespace detail {

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

// Values bounded away from zero so that max(0, x) is not probed at its kink.
inline Tensor<double> offset_tensor(Rng& rng, Shape shape) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return Tensor<double>(std::move(shape), std::move(v));
}

// sum(y * r) for a fixed random r, so no output component is weighted equally.
inline Tensor<double> project_out(const Tensor<double>& y, Rng& rng) {
  return sum(mul(y, random_tensor(rng, y.shape())));
}

struct SuiteCase {
  std::string name;
  std::function<GradCheckReport(std::uint64_t seed, const GradSuiteOptions&)> run;
};

// Wraps fn(inputs) -> tensor as a scalar loss with fixed projection weights.
inline GradCheckReport check_projected(const std::string& name, std::uint64_t seed, const GradSuiteOptions& opt,
                                       std::vector<Tensor<double>> inputs, std::vector<std::string> names,
                                       std::function<Tensor<double>(const std::vector<Tensor<double>>&)> fn) {
  const std::uint64_t proj_seed = derive_seed(seed, 0x9E0);
  auto scalar = [fn, proj_seed](const std::vector<Tensor<double>>& in) {
    Rng r(proj_seed);
    return project_out(fn(in), r);
  };
  GradCheckOptions o = opt.check;
  o.probe_seed = derive_seed(seed, 0x9E1);
  return grad_check(name, scalar, std::move(inputs), std::move(names), o);
}

inline ModelConfig tiny_model_config() {
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

inline Image random_image(Rng& rng, std::size_t h, std::size_t w) {
  Image img(h, w, 3);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

inline std::vector<SuiteCase> suite_cases() {
  using T = double;
  using In = std::vector<Tensor<T>>;
  std::vector<SuiteCase> c;
  auto add_case = [&](std::string name, std::function<GradCheckReport(std::uint64_t, const GradSuiteOptions&)> f) {
    c.push_back({std::move(name), std::move(f)});
  };
  auto simple = [&](std::string name, std::function<In(Rng&)> make, std::vector<std::string> names,
                    std::function<Tensor<T>(const In&)> fn) {
    const std::uint64_t tag = c.size();
    add_case(name, [name, tag, make, names, fn](std::uint64_t seed, const GradSuiteOptions& opt) {
      Rng rng(derive_seed(seed, tag));
      return check_projected(name, seed, opt, make(rng), names, fn);
    });
  };

  simple("add", [](Rng& r) { return In{random_tensor(r, {3, 4}), random_tensor(r, {3, 4})}; }, {"a", "b"},
         [](const In& x) { return add(x[0], x[1]); });
  simple("sub", [](Rng& r) { return In{random_tensor(r, {3, 4}), random_tensor(r, {3, 4})}; }, {"a", "b"},
         [](const In& x) { return sub(x[0], x[1]); });
  simple("mul", [](Rng& r) { return In{random_tensor(r, {3, 4}), random_tensor(r, {3, 4})}; }, {"a", "b"},
         [](const In& x) { return mul(x[0], x[1]); });
  simple("scale", [](Rng& r) { return In{random_tensor(r, {5})}; }, {"x"},
         [](const In& x) { return scale(x[0], T(-1.7)); });
  simple("add_bias", [](Rng& r) { return In{random_tensor(r, {2, 3, 4}), random_tensor(r, {4})}; }, {"x", "bias"},
         [](const In& x) { return add_bias(x[0], x[1]); });
  simple("relu", [](Rng& r) { return In{offset_tensor(r, {4, 5})}; }, {"x"}, [](const In& x) { return relu(x[0]); });
  simple("sum", [](Rng& r) { return In{random_tensor(r, {3, 3})}; }, {"x"}, [](const In& x) { return sum(x[0]); });
  simple("mean", [](Rng& r) { return In{random_tensor(r, {3, 3})}; }, {"x"}, [](const In& x) { return mean(x[0]); });
  simple("reshape", [](Rng& r) { return In{random_tensor(r, {2, 6})}; }, {"x"},
         [](const In& x) { return reshape(x[0], {3, 4}); });
  simple("permute", [](Rng& r) { return In{random_tensor(r, {2, 3, 4})}; }, {"x"},
         [](const In& x) { return permute(x[0], {2, 0, 1}); });
  simple("transpose", [](Rng& r) { return In{random_tensor(r, {3, 5})}; }, {"x"},
         [](const In& x) { return transpose(x[0]); });
  simple("gather_rows", [](Rng& r) { return In{random_tensor(r, {5, 3})}; }, {"x"},
         [](const In& x) { return gather_rows(x[0], {4, 0, 4, 2}); });
  simple("concat_rows", [](Rng& r) { return In{random_tensor(r, {2, 3}), random_tensor(r, {1, 3})}; }, {"a", "b"},
         [](const In& x) { return concat_rows(std::vector<Tensor<T>>{x[0], x[1], x[0]}); });
  simple("matmul", [](Rng& r) { return In{random_tensor(r, {3, 4}), random_tensor(r, {4, 2})}; }, {"a", "b"},
         [](const In& x) { return matmul(x[0], x[1]); });
  simple("linear",
         [](Rng& r) { return In{random_tensor(r, {2, 3, 4}), random_tensor(r, {4, 5}), random_tensor(r, {5})}; },
         {"x", "weight", "bias"}, [](const In& x) { return linear(x[0], x[1], x[2]); });
  simple("softmax", [](Rng& r) { return In{random_tensor(r, {3, 4, 5}, -2.0, 2.0)}; }, {"x"},
         [](const In& x) { return softmax(x[0], 1); });
  simple("layer_norm",
         [](Rng& r) { return In{random_tensor(r, {4, 6}), random_tensor(r, {6}, 0.5, 1.5), random_tensor(r, {6})}; },
         {"x", "gain", "shift"}, [](const In& x) { return layer_norm(x[0], x[1], x[2]); });
  simple("l2_normalize_rows", [](Rng& r) { return In{random_tensor(r, {3, 5})}; }, {"x"},
         [](const In& x) { return l2_normalize_rows(x[0]); });
  simple("cross_entropy", [](Rng& r) { return In{random_tensor(r, {4, 5}, -2.0, 2.0)}; }, {"logits"},
         [](const In& x) { return cross_entropy(x[0], {1, 0, 4, 4}); });
  simple("conv2d_zero",
         [](Rng& r) { return In{random_tensor(r, {5, 6, 2}), random_tensor(r, {3, 3, 2, 3}), random_tensor(r, {3})}; },
         {"x", "kernel", "bias"}, [](const In& x) { return conv2d(x[0], x[1], &x[2], 1, Padding::zero); });
  simple("conv2d_circular",
         [](Rng& r) { return In{random_tensor(r, {4, 5, 2}), random_tensor(r, {3, 3, 2, 2}), random_tensor(r, {2})}; },
         {"x", "kernel", "bias"}, [](const In& x) { return conv2d(x[0], x[1], &x[2], 1, Padding::circular_width); });
  simple("conv2d_stride2",
         [](Rng& r) { return In{random_tensor(r, {6, 7, 2}), random_tensor(r, {3, 3, 2, 3}), random_tensor(r, {3})}; },
         {"x", "kernel", "bias"}, [](const In& x) { return conv2d(x[0], x[1], &x[2], 2, Padding::circular_width); });
  simple("pool_axis_max", [](Rng& r) { return In{random_tensor(r, {4, 3, 2})}; }, {"x"},
         [](const In& x) { return pool_axis(x[0], 0, PoolMode::max); });
  simple("pool_axis_avg", [](Rng& r) { return In{random_tensor(r, {4, 3, 2})}; }, {"x"},
         [](const In& x) { return pool_axis(x[0], 1, PoolMode::avg); });
  simple("pool_window_max", [](Rng& r) { return In{random_tensor(r, {4, 6, 2})}; }, {"x"},
         [](const In& x) { return pool_window(x[0], 2, 3, PoolMode::max); });
  simple("pool_window_avg", [](Rng& r) { return In{random_tensor(r, {4, 6, 2})}; }, {"x"},
         [](const In& x) { return pool_window(x[0], 2, 3, PoolMode::avg); });
  simple("global_avg_pool", [](Rng& r) { return In{random_tensor(r, {3, 4, 2})}; }, {"x"},
         [](const In& x) { return global_avg_pool(x[0]); });
  simple("upsample2x", [](Rng& r) { return In{random_tensor(r, {2, 3, 2})}; }, {"x"},
         [](const In& x) { return upsample2x(x[0]); });
  simple("resize_bilinear", [](Rng& r) { return In{random_tensor(r, {3, 5, 2})}; }, {"x"},
         [](const In& x) { return resize_bilinear(x[0], 4, 3); });
  simple("lift", [](Rng& r) { return In{random_tensor(r, {2, 3, 4}, 0.0, 1.0), random_tensor(r, {2, 3, 5})}; },
         {"depth", "features"}, [](const In& x) { return lift(x[0], x[1]); });
  simple("attention",
         [](Rng& r) { return In{random_tensor(r, {3, 4}), random_tensor(r, {5, 4}), random_tensor(r, {5, 4})}; },
         {"q", "k", "v"}, [](const In& x) { return attention(x[0], x[1], x[2], 2); });
  simple("infonce", [](Rng& r) { return In{random_tensor(r, {4, 6}), random_tensor(r, {4, 6})}; }, {"ground", "aerial"},
         [](const In& x) {
           return reshape(infonce(l2_normalize_rows(x[0]), l2_normalize_rows(x[1]), T(0.05)), {1});
         });

  simple("multi_head_attention",
         [](Rng& r) {
           return In{random_tensor(r, {4, 8}), random_tensor(r, {6, 8}), random_tensor(r, {8, 8}),
                     random_tensor(r, {8, 8}), random_tensor(r, {8, 8}), random_tensor(r, {8, 8})};
         },
         {"queries", "keys", "wq", "wk", "wv", "wo"},
         [](const In& x) {
           AttentionParams<T> p;
           p.wq = x[2];
           p.wk = x[3];
           p.wv = x[4];
           p.wo = x[5];
           p.bq = p.bk = p.bv = p.bo = Tensor<T>::zeros({8});
           return multi_head_attention(x[0], x[1], p, 2);
         });

  // One window-to-window cross-attention sublayer on a 4x4 grid, N = 4.
  add_case("w2w_cross_attention", [](std::uint64_t seed, const GradSuiteOptions& opt) {
    Rng rng(derive_seed(seed, 0xC2055));
    const BevGeometry geo{4, 4, 4};
    const std::size_t ch = 8;
    In inputs{random_tensor(rng, {16, ch})};
    std::vector<std::string> names{"bev"};
    const Shape level_shapes[4] = {{1, 4, ch}, {2, 8, ch}, {4, 16, ch}, {8, 32, ch}};
    for (std::size_t l = 0; l < 4; ++l) {
      inputs.push_back(random_tensor(rng, level_shapes[l]));
      names.push_back("C" + std::to_string(l + 1));
    }
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      inputs.push_back(random_tensor(rng, {ch, ch}, -0.5, 0.5));
      names.push_back(w);
    }
    // The assignment is a hard argmax; freeze it at the unperturbed inputs.
    Pyramid<T> base;
    for (std::size_t l = 0; l < 4; ++l) base.levels[l] = inputs[1 + l].detach();
    const WindowSet bev = partition_bev(geo);
    const auto ground = partition_ground(base, geo.windows);
    const WindowAssignment assignment = match_windows(inputs[0].detach(), bev, base, ground);
    GradSuiteOptions sub = opt;
    sub.check.max_probes_per_input = opt.cross_probes;
    return check_projected("w2w_cross_attention", seed, sub, inputs, names, [=](const In& x) {
      Pyramid<T> pyr;
      for (std::size_t l = 0; l < 4; ++l) pyr.levels[l] = x[1 + l];
      AttentionParams<T> p;
      p.wq = x[5];
      p.wk = x[6];
      p.wv = x[7];
      p.wo = x[8];
      p.bq = p.bk = p.bv = p.bo = Tensor<T>::zeros({ch});
      NormParams<T> norm{Tensor<T>::full({ch}, T(1)), Tensor<T>::zeros({ch})};
      return w2w_cross_attention(x[0], bev, pyr, ground, assignment, p, norm, 2);
    });
  });

  simple("bev_init",
         [](Rng& r) { return In{random_tensor(r, {3, 8, 4}), random_tensor(r, {4, 3}), random_tensor(r, {4, 4, 4})}; },
         {"C4", "depth_w", "positional"}, [](const In& x) {
           const DepthField<T> depth = predict_depth(x[0], x[1], Tensor<T>::zeros({3}));
           return resample_to_grid(collapse_height(lift_to_3d(x[0], depth)), BevGeometry{4, 4, 4}, x[2]).tokens;
         });

  // Symmetric InfoNCE of a tiny two-branch model on a batch of two pairs,
  // differentiated with respect to every parameter tensor (probe subset).
  add_case("end_to_end", [](std::uint64_t seed, const GradSuiteOptions& opt) {
    const ModelConfig cfg = tiny_model_config();
    auto model = std::make_shared<W2WModel<T>>(cfg, derive_seed(seed, 0xE2E));
    Rng rng(derive_seed(seed, 0xE2E1));
    std::vector<TrainingSample> batch;
    // A zero-padded crop and a circular panorama.
    batch.push_back({{random_image(rng, 16, 40), false}, random_image(rng, 16, 16)});
    batch.push_back({{random_image(rng, 16, 64), true}, random_image(rng, 16, 16)});
    // Zero biases put every pre-activation fed by padding or a dead layer
    // exactly on the kink of max(0, x); move off it before differencing.
    for (const auto& [name, t] : model->params().entries()) {
      Tensor<T> p = t;
      for (auto& v : p.mutable_data()) v += rng.uniform(-0.05, 0.05);
    }
    In inputs;
    std::vector<std::string> names;
    for (const auto& [name, t] : model->params().entries()) {
      inputs.push_back(t);
      names.push_back(name);
    }
    auto fn = [model, batch](const In&) {
      std::vector<Tensor<T>> g, a;
      for (const auto& s : batch) {
        g.push_back(model->embed_ground(s.ground));
        a.push_back(model->embed_aerial(s.aerial));
      }
      return reshape(infonce(concat_rows(g), concat_rows(a), T(0.5)), {1});
    };
    GradCheckOptions o = opt.check;
    o.max_probes_per_input = opt.model_probes;
    o.probe_seed = derive_seed(seed, 0xE2E2);
    return grad_check("end_to_end", fn, inputs, names, o);
  });
  return c;
}

}  // namespace detail

inline std::vector<std::string> grad_suite_names() {
  std::vector<std::string> out;
  for (const auto& c : detail::suite_cases()) out.push_back(c.name);
  return out;
}

// Runs every case once for `seed`.
inline std::vector<GradCheckReport> run_grad_suite(std::uint64_t seed, const GradSuiteOptions& options = {}) {
  std::vector<GradCheckReport> out;
  for (const auto& c : detail::suite_cases()) out.push_back(c.run(seed, options));
  return out;
}

}  // namespace w2w
