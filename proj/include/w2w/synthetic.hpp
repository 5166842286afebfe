// Seeded toy world: scenes of coloured landmarks around a camera, rendered as
// a ground-level panorama and a top-down aerial raster.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "w2w/image.hpp"
#include "w2w/rng.hpp"

namespace w2w {

struct Landmark {
  double range = 0.0;    // metres from the camera
  double azimuth = 0.0;  // radians, clockwise from north, [0, 2pi)
  double footprint = 0.0;
  std::array<std::uint8_t, 3> color{};
};

struct Scene {
  std::size_t id = 0;
  std::uint64_t seed = 0;
  std::vector<Landmark> landmarks;
  std::array<std::uint8_t, 3> base_color{};
};

struct WorldConfig {
  std::size_t pano_height = 32;
  std::size_t pano_width = 128;
  std::size_t aerial_size = 64;
  double meters_per_pixel = 1.0;
  std::size_t landmarks = 8;
  double range_min = 5.0, range_max = 26.0;
  double footprint_min = 2.0, footprint_max = 4.0;
  double height_scale = 80.0;  // painted rows = round(height_scale / range)
  // Landmark colour channels take one of this many evenly spaced levels
  // (0 and 255 included); 0 draws every channel uniformly from [0, 255].
  std::size_t color_levels = 4;
  std::array<std::uint8_t, 3> sky_color{170, 200, 235};
};

inline constexpr std::array<std::array<std::uint8_t, 3>, 3> kGroundPalette{{
    {110, 100, 80}, {90, 120, 70}, {130, 125, 115}}};

struct RenderedPair {
  std::size_t scene_id = 0;
  Image pano;
  Image aerial;
  std::size_t roll = 0;
  double fov = 360.0;
};

namespace detail {

inline double wrap_angle(double a) {
  a = std::fmod(a + std::numbers::pi, 2.0 * std::numbers::pi);
  if (a < 0) a += 2.0 * std::numbers::pi;
  return a - std::numbers::pi;
}

inline std::uint8_t landmark_channel(Rng& rng, std::size_t levels) {
  if (levels < 2) return static_cast<std::uint8_t>(rng.below(256));
  return static_cast<std::uint8_t>(rng.below(levels) * 255 / (levels - 1));
}

inline bool fits(const std::vector<Landmark>& placed, const Landmark& c, double half_extent) {
  if (c.range - c.footprint < 1.0 || c.range + c.footprint > half_extent - 1.0) return false;
  const double cx = c.range * std::sin(c.azimuth), cy = c.range * std::cos(c.azimuth);
  for (const auto& p : placed) {
    const double px = p.range * std::sin(p.azimuth), py = p.range * std::cos(p.azimuth);
    if (std::hypot(cx - px, cy - py) < c.footprint + p.footprint + 0.5) return false;
  }
  return true;
}

}  // namespace detail

// Rejection-samples K non-overlapping landmarks. After 1000 failed attempts for
// one landmark the footprint range shrinks by 20% and sampling resumes.
inline Scene generate_scene(std::uint64_t seed, std::size_t id, const WorldConfig& cfg) {
  if (cfg.landmarks < 3) throw std::invalid_argument("a scene needs at least 3 landmarks");
  Rng rng(seed);
  Scene scene;
  scene.id = id;
  scene.seed = seed;
  scene.base_color = kGroundPalette[rng.below(kGroundPalette.size())];
  const double half_extent = 0.5 * static_cast<double>(cfg.aerial_size) * cfg.meters_per_pixel;
  double fmin = cfg.footprint_min, fmax = cfg.footprint_max;
  while (scene.landmarks.size() < cfg.landmarks) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      Landmark l;
      l.range = rng.uniform(cfg.range_min, cfg.range_max);
      l.azimuth = rng.uniform(0.0, 2.0 * std::numbers::pi);
      l.footprint = rng.uniform(fmin, fmax);
      for (auto& ch : l.color) ch = detail::landmark_channel(rng, cfg.color_levels);
      if (detail::fits(scene.landmarks, l, half_extent)) {
        scene.landmarks.push_back(l);
        placed = true;
      }
    }
    if (!placed) {
      fmin *= 0.8;
      fmax *= 0.8;
      if (fmax < 0.5) throw std::runtime_error("generate_scene: cannot pack " + std::to_string(cfg.landmarks) + " landmarks");
    }
  }
  return scene;
}

// Orthographic top-down raster centred on the camera, north up.
inline Image render_aerial(const Scene& scene, const WorldConfig& cfg) {
  const std::size_t n = cfg.aerial_size;
  Image img(n, n, 3);
  const double half = 0.5 * static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double east = (static_cast<double>(j) + 0.5 - half) * cfg.meters_per_pixel;
      const double north = (half - static_cast<double>(i) - 0.5) * cfg.meters_per_pixel;
      auto color = scene.base_color;
      for (const auto& l : scene.landmarks) {
        const double lx = l.range * std::sin(l.azimuth), ly = l.range * std::cos(l.azimuth);
        if (std::hypot(east - lx, north - ly) <= l.footprint) color = l.color;
      }
      for (std::size_t c = 0; c < 3; ++c) img.at(i, j, c) = color[c];
    }
  return img;
}

inline std::size_t painted_height(const Landmark& l, const WorldConfig& cfg) {
  const std::size_t room = cfg.pano_height - cfg.pano_height / 2;
  const auto rows = static_cast<std::size_t>(std::lround(cfg.height_scale / std::max(l.range, 1e-9)));
  return std::clamp<std::size_t>(rows, 1, room);
}

// Column c looks along azimuth 2*pi*c/W. Sky above the horizon row, ground
// below; each landmark covers the columns within its angular footprint and
// round(height_scale / range) rows downward from the horizon, far ones first.
inline Image render_pano(const Scene& scene, const WorldConfig& cfg) {
  const std::size_t h = cfg.pano_height, w = cfg.pano_width, horizon = h / 2;
  Image img(h, w, 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = y < horizon ? cfg.sky_color[c] : scene.base_color[c];
  std::vector<const Landmark*> order;
  for (const auto& l : scene.landmarks) order.push_back(&l);
  std::stable_sort(order.begin(), order.end(), [](const Landmark* a, const Landmark* b) { return a->range > b->range; });
  for (const Landmark* l : order) {
    const double half_angle = std::asin(std::min(1.0, l->footprint / std::max(l->range, 1e-9)));
    const std::size_t rows = painted_height(*l, cfg);
    for (std::size_t x = 0; x < w; ++x) {
      const double phi = 2.0 * std::numbers::pi * static_cast<double>(x) / static_cast<double>(w);
      if (std::abs(detail::wrap_angle(phi - l->azimuth)) > half_angle) continue;
      for (std::size_t y = horizon; y < horizon + rows; ++y)
        for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = l->color[c];
    }
  }
  return img;
}

inline std::size_t crop_width(std::size_t pano_width, double fov) {
  if (!(fov > 0.0 && fov <= 360.0)) throw std::invalid_argument("fov must be in (0, 360], got " + std::to_string(fov));
  const auto w = static_cast<std::size_t>(std::lround(static_cast<double>(pano_width) * fov / 360.0));
  return std::clamp<std::size_t>(w, 1, pano_width);
}

// out[:, (x + shift) mod W] = in[:, x]
inline Image roll_columns(const Image& img, std::size_t shift) {
  Image out(img.height, img.width, img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, (x + shift) % img.width, c) = img.at(y, x, c);
  return out;
}

struct Augmented {
  Image image;
  std::size_t roll = 0;
  double fov = 360.0;
};

// Rolls by `offset` columns, then keeps the first round(W * fov / 360) columns.
inline Augmented augment_with_offset(const Image& pano, double fov, std::size_t offset) {
  const std::size_t keep = crop_width(pano.width, fov);
  const Image rolled = roll_columns(pano, offset % pano.width);
  Augmented a{Image(pano.height, keep, pano.channels), offset % pano.width, fov};
  for (std::size_t y = 0; y < pano.height; ++y)
    std::copy_n(rolled.pixels.begin() + static_cast<long>(y * pano.width * pano.channels), keep * pano.channels,
                a.image.pixels.begin() + static_cast<long>(y * keep * pano.channels));
  return a;
}

// Unknown orientation and limited field of view: a uniform random roll in
// [0, W) followed by a width crop.
inline Augmented augment(const Image& pano, double fov, Rng& rng) {
  crop_width(pano.width, fov);
  return augment_with_offset(pano, fov, static_cast<std::size_t>(rng.below(pano.width)));
}

inline RenderedPair render_pair(const Scene& scene, const WorldConfig& cfg) {
  return {scene.id, render_pano(scene, cfg), render_aerial(scene, cfg), 0, 360.0};
}

struct Dataset {
  std::vector<RenderedPair> train, val, test;
};

struct SplitFractions {
  double train = 0.75, val = 0.0, test = 0.25;
};

inline std::uint64_t scene_seed(std::uint64_t seed, std::size_t id) { return derive_seed(seed, 0x5CE11E, id); }

// Splits scene ids with a seeded shuffle; each split is sorted by id.
inline std::array<std::vector<std::size_t>, 3> split_ids(std::size_t num_scenes, const SplitFractions& f,
                                                         std::uint64_t seed) {
  if (f.train < 0 || f.val < 0 || f.test < 0 || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw std::invalid_argument("split fractions must be non-negative and sum to 1");
  }
  std::vector<std::size_t> ids(num_scenes);
  for (std::size_t i = 0; i < num_scenes; ++i) ids[i] = i;
  Rng rng(derive_seed(seed, 0x5B717));
  rng.shuffle(ids);
  const auto n_train = static_cast<std::size_t>(std::lround(f.train * static_cast<double>(num_scenes)));
  const auto n_val = std::min(num_scenes - n_train,
                              static_cast<std::size_t>(std::lround(f.val * static_cast<double>(num_scenes))));
  std::array<std::vector<std::size_t>, 3> out;
  out[0].assign(ids.begin(), ids.begin() + static_cast<long>(n_train));
  out[1].assign(ids.begin() + static_cast<long>(n_train), ids.begin() + static_cast<long>(n_train + n_val));
  out[2].assign(ids.begin() + static_cast<long>(n_train + n_val), ids.end());
  for (auto& s : out) std::sort(s.begin(), s.end());
  return out;
}

inline Dataset make_dataset(std::size_t num_scenes, const SplitFractions& fractions, std::uint64_t seed,
                            const WorldConfig& cfg) {
  const auto splits = split_ids(num_scenes, fractions, seed);
  Dataset ds;
  std::array<std::vector<RenderedPair>*, 3> dst{&ds.train, &ds.val, &ds.test};
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t id : splits[s]) dst[s]->push_back(render_pair(generate_scene(scene_seed(seed, id), id, cfg), cfg));
  return ds;
}

// key=value sidecar describing a scene.
inline std::string scene_metadata(const Scene& scene, std::size_t roll = 0, double fov = 360.0) {
  std::ostringstream os;
  os << "id=" << scene.id << '\n'
     << "seed=" << scene.seed << '\n'
     << "K=" << scene.landmarks.size() << '\n'
     << "base_color=" << int(scene.base_color[0]) << ',' << int(scene.base_color[1]) << ','
     << int(scene.base_color[2]) << '\n';
  os.precision(17);
  for (std::size_t i = 0; i < scene.landmarks.size(); ++i) {
    const auto& l = scene.landmarks[i];
    os << "landmark" << i << '=' << l.range << ',' << l.azimuth << ',' << l.footprint << ',' << int(l.color[0])
       << ',' << int(l.color[1]) << ',' << int(l.color[2]) << '\n';
  }
  os << "roll=" << roll << '\n' << "fov=" << fov << '\n';
  return os.str();
}

inline std::string scene_dir_name(std::size_t id) {
  std::ostringstream os;
  os << "scene_" << std::setw(5) << std::setfill('0') << id;
  return os.str();
}

struct DatasetManifest {
  std::size_t train = 0, val = 0, test = 0;
};

// Writes <root>/{train,val,test}/scene_NNNNN/{pano.ppm,aerial.ppm,meta.txt}
// plus <root>/manifest.txt.
inline DatasetManifest write_dataset(const std::filesystem::path& root, std::size_t num_scenes,
                                     const SplitFractions& fractions, std::uint64_t seed, const WorldConfig& cfg) {
  namespace fs = std::filesystem;
  const auto splits = split_ids(num_scenes, fractions, seed);
  const std::array<const char*, 3> names{"train", "val", "test"};
  DatasetManifest m{splits[0].size(), splits[1].size(), splits[2].size()};
  for (std::size_t s = 0; s < 3; ++s) {
    fs::create_directories(root / names[s]);
    for (std::size_t id : splits[s]) {
      const Scene scene = generate_scene(scene_seed(seed, id), id, cfg);
      const fs::path dir = root / names[s] / scene_dir_name(id);
      fs::create_directories(dir);
      write_ppm(dir / "pano.ppm", render_pano(scene, cfg));
      write_ppm(dir / "aerial.ppm", render_aerial(scene, cfg));
      std::ofstream(dir / "meta.txt") << scene_metadata(scene);
    }
  }
  std::ofstream manifest(root / "manifest.txt");
  manifest << "seed=" << seed << "\nscenes=" << num_scenes << "\ntrain=" << m.train << "\nval=" << m.val
           << "\ntest=" << m.test << '\n';
  return m;
}

// Reads one split directory; pairs are ordered by scene id.
inline std::vector<RenderedPair> read_split(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::vector<RenderedPair> out;
  if (!fs::is_directory(dir)) return out;
  std::vector<fs::path> scenes;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) scenes.push_back(e.path());
  std::sort(scenes.begin(), scenes.end());
  for (const auto& p : scenes) {
    RenderedPair pair;
    std::ifstream meta(p / "meta.txt");
    if (!meta) throw std::runtime_error("missing " + (p / "meta.txt").string());
    std::string line;
    while (std::getline(meta, line)) {
      if (line.rfind("id=", 0) == 0) pair.scene_id = std::stoul(line.substr(3));
    }
    pair.pano = read_ppm(p / "pano.ppm");
    pair.aerial = read_ppm(p / "aerial.ppm");
    out.push_back(std::move(pair));
  }
  return out;
}

inline Dataset read_dataset(const std::filesystem::path& root) {
  if (!std::filesystem::exists(root / "manifest.txt")) {
    throw std::runtime_error("dataset not found: " + (root / "manifest.txt").string());
  }
  return {read_split(root / "train"), read_split(root / "val"), read_split(root / "test")};
}

}  // namespace w2w
