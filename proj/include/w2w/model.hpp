// The two-branch retrieval model and its contrastive training step.
#pragma once

#include <array>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "w2w/backbone.hpp"
#include "w2w/bev_encoder.hpp"
#include "w2w/bev_init.hpp"
#include "w2w/image.hpp"
#include "w2w/metric.hpp"
#include "w2w/optim.hpp"
#include "w2w/synthetic.hpp"

namespace w2w {

struct ModelConfig {
  std::size_t model_channels = 32;
  std::size_t depth_bins = 16;
  std::size_t embed_dim = 64;
  std::array<std::size_t, 4> backbone_channels{16, 24, 32, 48};
  EncoderConfig encoder;
  bool bev_init_enabled = true;
  bool shared_backbone = false;
  HeightCollapse height_collapse = HeightCollapse::max;

  void validate() const {
    if (model_channels == 0) throw ConfigError("model_channels must be positive");
    if (embed_dim == 0) throw ConfigError("embed_dim must be positive");
    if (depth_bins == 0) throw ConfigError("depth_bins must be positive");
    for (auto c : backbone_channels)
      if (c == 0) throw ConfigError("backbone_channels must be positive");
    encoder.validate(model_channels);
  }
};

// Ground input width must make every pyramid level split into N strips.
inline std::size_t ground_width_multiple(std::size_t windows) { return kInputDivisor * windows; }

struct GroundInput {
  Image image;
  bool full_panorama = false;
};

// Image -> tensor, zero-padding the right edge of a limited-FoV crop up to the
// next valid width. Full panoramas keep their width and use circular padding.
template <typename T>
std::pair<Tensor<T>, Padding> prepare_ground(const GroundInput& in, std::size_t windows) {
  const std::size_t multiple = ground_width_multiple(windows);
  Tensor<T> t = image_to_tensor<T>(in.image);
  if (in.image.height % kInputDivisor != 0) {
    throw ConfigError("ground image height " + std::to_string(in.image.height) + " must be divisible by 16");
  }
  if (in.full_panorama) {
    if (in.image.width % multiple != 0) {
      throw ConfigError("panorama width " + std::to_string(in.image.width) + " must be divisible by " +
                        std::to_string(multiple) + " (16 * windows)");
    }
    return {t, Padding::circular_width};
  }
  const std::size_t w = in.image.width;
  const std::size_t padded = (w + multiple - 1) / multiple * multiple;
  if (padded == w) return {t, Padding::zero};
  const std::size_t h = in.image.height, c = in.image.channels;
  std::vector<T> v(h * padded * c, T(0));
  for (std::size_t y = 0; y < h; ++y)
    std::copy_n(t.data().begin() + static_cast<long>(y * w * c), w * c, v.begin() + static_cast<long>(y * padded * c));
  return {Tensor<T>({h, padded, c}, std::move(v)), Padding::zero};
}

template <typename T>
struct GroundTrace {
  Pyramid<T> pyramid;
  DepthField<T> depth;
  BevGrid<T> initial;
  Tensor<T> bev;
  EncoderTrace encoder;
};

template <typename T>
class W2WModel {
 public:
  W2WModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config.validate();
    Rng rng(seed);
    const BackboneConfig bb{config.backbone_channels, config.model_channels, 3};
    ground_ = Backbone<T>("ground", bb, params_, rng);
    aerial_ = config.shared_backbone ? ground_ : Backbone<T>("aerial", bb, params_, rng);
    bev_init_ = BevInitializer<T>(config.encoder.geometry, config.model_channels, config.depth_bins, params_, rng);
    bev_init_.enabled = config.bev_init_enabled;
    bev_init_.collapse = config.height_collapse;
    encoder_ = BevEncoder<T>(config.encoder, config.model_channels, params_, rng);
    ground_head_ = EmbeddingHead<T>("head.ground", config.model_channels, config.embed_dim, params_, rng);
    aerial_head_ = EmbeddingHead<T>("head.aerial", config.model_channels, config.embed_dim, params_, rng);
  }

  W2WModel(const W2WModel&) = delete;
  W2WModel& operator=(const W2WModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const Backbone<T>& ground_backbone() const { return ground_; }
  const Backbone<T>& aerial_backbone() const { return aerial_; }
  const BevInitializer<T>& bev_initializer() const { return bev_init_; }
  const BevEncoder<T>& encoder() const { return encoder_; }

  // BEV representation of a prepared ground image: rows x cols x C.
  Tensor<T> ground_bev(const Tensor<T>& image, Padding padding, GroundTrace<T>* trace = nullptr) const {
    Pyramid<T> pyramid = ground_.forward(image, padding);
    DepthField<T> depth;
    BevGrid<T> grid = bev_init_.initialize(pyramid.finest(), trace != nullptr ? &depth : nullptr);
    Tensor<T> bev = encoder_.encode(grid, pyramid, trace != nullptr ? &trace->encoder : nullptr);
    if (trace != nullptr) {
      trace->pyramid = pyramid;
      trace->depth = depth;
      trace->initial = grid;
      trace->bev = bev;
    }
    return bev;
  }

  Tensor<T> embed_ground(const GroundInput& in, GroundTrace<T>* trace = nullptr) const {
    auto [image, padding] = prepare_ground<T>(in, config_.encoder.geometry.windows);
    return ground_head_(ground_bev(image, padding, trace));
  }

  Tensor<T> embed_aerial(const Image& aerial) const {
    return aerial_head_(aerial_.encode_aerial(image_to_tensor<T>(aerial)));
  }

 private:
  ModelConfig config_;
  ParamStore<T> params_;
  Backbone<T> ground_, aerial_;
  BevInitializer<T> bev_init_;
  BevEncoder<T> encoder_;
  EmbeddingHead<T> ground_head_, aerial_head_;
};

struct TrainingSample {
  GroundInput ground;
  Image aerial;
};

// Samples `batch` distinct training pairs and augments their panoramas; a pure
// function of (seed, step) so that resumed runs see the same batches.
inline std::vector<TrainingSample> make_batch(const std::vector<RenderedPair>& pairs, std::size_t batch, double fov,
                                              std::uint64_t seed, std::size_t step) {
  if (pairs.size() < batch) {
    throw ConfigError("batch_size " + std::to_string(batch) + " exceeds the " + std::to_string(pairs.size()) +
                      " training pairs");
  }
  Rng rng(derive_seed(seed, 0xBA7C4, step));
  std::vector<std::size_t> idx(pairs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t i = 0; i < batch; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
  std::vector<TrainingSample> out;
  out.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    const auto& p = pairs[idx[i]];
    out.push_back({{augment(p.pano, fov, rng).image, fov >= 360.0}, p.aerial});
  }
  return out;
}

template <typename T>
std::string parameter_norms(const ParamStore<T>& params) {
  std::ostringstream os;
  for (const auto& [name, t] : params.entries()) {
    double sq = 0.0, gsq = 0.0;
    for (T v : t.data()) sq += static_cast<double>(v) * v;
    for (T g : t.grad()) gsq += static_cast<double>(g) * g;
    os << name << " |w|=" << std::sqrt(sq) << " |g|=" << std::sqrt(gsq) << '\n';
  }
  return os.str();
}

// Forward both branches, symmetric InfoNCE, backward, one AdamW update.
template <typename T>
double train_step(W2WModel<T>& model, const std::vector<TrainingSample>& batch, AdamW<T>& optimizer, double lr,
                  T temperature) {
  if (batch.empty()) throw ConfigError("train_step: empty batch");
  Tape<T> tape;
  double loss_value = 0.0;
  {
    TapeScope<T> scope(tape);
    std::vector<Tensor<T>> ground, aerial;
    for (const auto& s : batch) {
      ground.push_back(model.embed_ground(s.ground));
      aerial.push_back(model.embed_aerial(s.aerial));
    }
    const Tensor<T> loss = infonce(concat_rows(ground), concat_rows(aerial), temperature);
    loss_value = static_cast<double>(loss.item());
    if (!std::isfinite(loss_value)) {
      throw NumericError("non-finite loss; parameter norms:\n" + parameter_norms(model.params()));
    }
    model.params().zero_grad();
    tape.backward(loss);
  }
  optimizer.step(model.params(), lr);
  model.params().zero_grad();
  return loss_value;
}

// Embeds every reference aerial image once.
template <typename T>
Tensor<T> embed_aerials(const W2WModel<T>& model, const std::vector<RenderedPair>& pairs) {
  NoGradScope<T> no_grad;
  std::vector<Tensor<T>> rows;
  for (const auto& p : pairs) rows.push_back(model.embed_aerial(p.aerial));
  return concat_rows(rows);
}

// Ground query i is pairs[i]'s panorama, rolled and cropped with an offset
// drawn from (seed, scene id); the truth reference is row i.
template <typename T>
RetrievalReport evaluate_retrieval(const W2WModel<T>& model, const std::vector<RenderedPair>& pairs,
                                   const Tensor<T>& aerial_embeddings, double fov, std::uint64_t seed) {
  NoGradScope<T> no_grad;
  std::vector<Tensor<T>> rows;
  std::vector<std::size_t> truth;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    Rng rng(derive_seed(seed, 0xE7A1, pairs[i].scene_id));
    const std::size_t offset = rng.below(pairs[i].pano.width);
    rows.push_back(model.embed_ground({augment_with_offset(pairs[i].pano, fov, offset).image, fov >= 360.0}));
    truth.push_back(i);
  }
  return recall_at_k(concat_rows(rows), aerial_embeddings, truth);
}

}  // namespace w2w
