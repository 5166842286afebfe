#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "w2w/synthetic.hpp"

using namespace w2w;
namespace fs = std::filesystem;

namespace {

Scene single(double range, double azimuth, double footprint) {
  Scene s;
  s.base_color = {10, 20, 30};
  s.landmarks.push_back({range, azimuth, footprint, {200, 0, 0}});
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("w2w_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Scene, DeterministicAndValid) {
  const WorldConfig cfg;
  const auto a = generate_scene(42, 0, cfg), b = generate_scene(42, 0, cfg);
  ASSERT_EQ(a.landmarks.size(), cfg.landmarks);
  for (std::size_t i = 0; i < a.landmarks.size(); ++i) {
    EXPECT_EQ(a.landmarks[i].range, b.landmarks[i].range);
    EXPECT_EQ(a.landmarks[i].color, b.landmarks[i].color);
    EXPECT_GE(a.landmarks[i].range, cfg.range_min);
    EXPECT_LT(a.landmarks[i].range, cfg.range_max);
  }
  // pairwise non-overlapping footprints
  for (std::size_t i = 0; i < a.landmarks.size(); ++i)
    for (std::size_t j = i + 1; j < a.landmarks.size(); ++j) {
      const auto &p = a.landmarks[i], &q = a.landmarks[j];
      const double dx = p.range * std::sin(p.azimuth) - q.range * std::sin(q.azimuth);
      const double dy = p.range * std::cos(p.azimuth) - q.range * std::cos(q.azimuth);
      EXPECT_GT(std::hypot(dx, dy), p.footprint + q.footprint);
    }
}

TEST(Scene, DifferentSeedsGiveDifferentScenes) {
  const WorldConfig cfg;
  std::set<std::vector<double>> seen;
  for (std::uint64_t s = 0; s < 100; ++s) {
    std::vector<double> key;
    for (const auto& l : generate_scene(s, s, cfg).landmarks) key.push_back(l.azimuth);
    seen.insert(key);
  }
  EXPECT_EQ(seen.size(), 100u);
}

TEST(Scene, MinimalLandmarkCountAndErrors) {
  WorldConfig cfg;
  cfg.landmarks = 3;
  const auto s = generate_scene(1, 0, cfg);
  EXPECT_EQ(s.landmarks.size(), 3u);
  EXPECT_EQ(render_pano(s, cfg).width, cfg.pano_width);
  cfg.landmarks = 2;
  EXPECT_THROW(generate_scene(1, 0, cfg), std::invalid_argument);
  cfg.landmarks = 400;
  EXPECT_THROW(generate_scene(1, 0, cfg), std::runtime_error);
}

TEST(Scene, DiscreteColourLevels) {
  WorldConfig cfg;
  cfg.color_levels = 3;
  for (std::uint64_t seed = 0; seed < 20; ++seed)
    for (const auto& l : generate_scene(seed, 0, cfg).landmarks)
      for (auto ch : l.color) EXPECT_TRUE(ch == 0 || ch == 127 || ch == 255) << int(ch);
}

TEST(Aerial, EmptySceneIsUniformBase) {
  const WorldConfig cfg;
  Scene s;
  s.base_color = {1, 2, 3};
  const auto img = render_aerial(s, cfg);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_EQ(img.pixels[i], i % 3 + 1);
}

TEST(Aerial, CentredDiscAndAreaWithinFifteenPercent) {
  const WorldConfig cfg;
  const auto img = render_aerial(single(0.0, 0.0, 6.0), cfg);
  double cy = 0, cx = 0, n = 0;
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x)
      if (img.at(y, x, 0) == 200) {
        cy += y + 0.5;
        cx += x + 0.5;
        ++n;
      }
  EXPECT_NEAR(cy / n, 32.0, 1e-9);
  EXPECT_NEAR(cx / n, 32.0, 1e-9);
  for (double r : {2.0, 3.0, 4.5, 8.0}) {
    const auto disc = render_aerial(single(10.0, 1.0, r), cfg);
    std::size_t count = 0;
    for (std::size_t p = 0; p < 64 * 64; ++p) count += disc.pixels[p * 3] == 200;
    const double area = std::numbers::pi * r * r;
    EXPECT_NEAR(double(count), area, 0.15 * area) << "radius " << r;
  }
}

TEST(Aerial, NorthIsUpEastIsRight) {
  const WorldConfig cfg;
  const auto north = render_aerial(single(20.0, 0.0, 2.0), cfg);
  EXPECT_EQ(north.at(32 - 20, 32, 0), 200);
  const auto east = render_aerial(single(20.0, std::numbers::pi / 2, 2.0), cfg);
  EXPECT_EQ(east.at(32, 32 + 20, 0), 200);
}

TEST(Pano, LandmarkAtZeroAzimuthWrapsAroundColumnZero) {
  const WorldConfig cfg;
  const auto img = render_pano(single(10.0, 0.0, 3.0), cfg);
  const std::size_t row = cfg.pano_height / 2;
  EXPECT_EQ(img.at(row, 0, 0), 200);
  EXPECT_EQ(img.at(row, cfg.pano_width - 1, 0), 200);
  EXPECT_NE(img.at(row, cfg.pano_width / 2, 0), 200);
  EXPECT_EQ(img.at(0, 0, 0), cfg.sky_color[0]);
}

TEST(Pano, DoublingRangeHalvesPaintedHeight) {
  const WorldConfig cfg;
  for (double r : {5.0, 6.0, 8.0, 10.0}) {
    const auto near = painted_height({r, 0, 1, {}}, cfg), far = painted_height({2 * r, 0, 1, {}}, cfg);
    EXPECT_EQ(far, static_cast<std::size_t>(std::lround(cfg.height_scale / (2 * r))));
    EXPECT_NEAR(double(near) / 2.0, double(far), 1.0);
  }
}

TEST(Pano, PaintedCentroidMatchesAzimuth) {
  const WorldConfig cfg;
  Rng rng(3);
  const double col = 2 * std::numbers::pi / double(cfg.pano_width);
  for (int rep = 0; rep < 100; ++rep) {
    const double theta = rng.uniform(0.0, 2 * std::numbers::pi);
    const auto img = render_pano(single(rng.uniform(5.0, 25.0), theta, 3.0), cfg);
    double sx = 0, sy = 0;
    for (std::size_t x = 0; x < cfg.pano_width; ++x)
      if (img.at(cfg.pano_height / 2, x, 0) == 200) {
        sx += std::sin(x * col);
        sy += std::cos(x * col);
      }
    double err = std::atan2(sx, sy) - theta;
    err = std::remainder(err, 2 * std::numbers::pi);
    EXPECT_LE(std::abs(err), col) << "theta " << theta;
  }
}

TEST(Pano, NearerLandmarksOccludeFarther) {
  const WorldConfig cfg;
  Scene s = single(20.0, 0.0, 4.0);
  s.landmarks.push_back({6.0, 0.0, 1.0, {0, 0, 250}});
  const auto img = render_pano(s, cfg);
  EXPECT_EQ(img.at(cfg.pano_height / 2, 0, 2), 250);
}

TEST(Augment, CropWidthAndRoll) {
  const WorldConfig cfg;
  const auto pano = render_pano(generate_scene(5, 0, cfg), cfg);
  EXPECT_EQ(augment_with_offset(pano, 90.0, 0).image.width, 32u);
  EXPECT_EQ(augment_with_offset(pano, 70.0, 0).image.width, 25u);
  EXPECT_EQ(augment_with_offset(pano, 360.0, 0).image, pano);
  EXPECT_EQ(roll_columns(roll_columns(pano, 50), 100), roll_columns(pano, 150 % 128));
  EXPECT_THROW(augment_with_offset(pano, 0.0, 0), std::invalid_argument);
  EXPECT_THROW(augment_with_offset(pano, 361.0, 0), std::invalid_argument);
}

TEST(Augment, CropIsBitExactColumnSubsetOfRolledPano) {
  const WorldConfig cfg;
  const auto pano = render_pano(generate_scene(6, 0, cfg), cfg);
  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    const auto a = augment(pano, 90.0, rng);
    const auto rolled = roll_columns(pano, a.roll);
    for (std::size_t y = 0; y < pano.height; ++y)
      for (std::size_t x = 0; x < a.image.width; ++x)
        for (std::size_t c = 0; c < 3; ++c) ASSERT_EQ(a.image.at(y, x, c), rolled.at(y, x, c));
  }
}

TEST(Dataset, SplitCountsAndDisjointness) {
  const auto ids = split_ids(256, {0.75, 0.0, 0.25}, 1);
  EXPECT_EQ(ids[0].size(), 192u);
  EXPECT_EQ(ids[1].size(), 0u);
  EXPECT_EQ(ids[2].size(), 64u);
  std::set<std::size_t> all(ids[0].begin(), ids[0].end());
  for (auto id : ids[2]) EXPECT_TRUE(all.insert(id).second);
  EXPECT_EQ(all.size(), 256u);
  EXPECT_THROW(split_ids(10, {0.5, 0.2, 0.2}, 1), std::invalid_argument);
}

TEST(Dataset, WriteReadRoundTripAndDeterminism) {
  WorldConfig cfg;
  const auto a = temp_dir("ds_a"), b = temp_dir("ds_b");
  const auto m = write_dataset(a, 12, {0.5, 0.25, 0.25}, 9, cfg);
  write_dataset(b, 12, {0.5, 0.25, 0.25}, 9, cfg);
  EXPECT_EQ(m.train + m.val + m.test, 12u);
  const auto ds = read_dataset(a);
  const auto mem = make_dataset(12, {0.5, 0.25, 0.25}, 9, cfg);
  ASSERT_EQ(ds.train.size(), mem.train.size());
  ASSERT_EQ(ds.test.size(), mem.test.size());
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    EXPECT_EQ(ds.train[i].scene_id, mem.train[i].scene_id);
    EXPECT_EQ(ds.train[i].pano, mem.train[i].pano);
    EXPECT_EQ(ds.train[i].aerial, mem.train[i].aerial);
  }
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(b / fs::relative(e.path(), a))) << e.path();
  }
  EXPECT_EQ(files, 12u * 3u + 1u);
  EXPECT_THROW(read_dataset(temp_dir("missing")), std::runtime_error);
  fs::remove_all(a);
  fs::remove_all(b);
}
