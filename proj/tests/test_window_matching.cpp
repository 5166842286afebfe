#include <gtest/gtest.h>

#include <set>

#include "oracles.hpp"

using namespace w2w;

TEST(Partition, BevWindowsTileTheGridInRasterOrder) {
  const auto set = partition_bev({8, 12, 4});
  ASSERT_EQ(set.count(), 4u);
  std::multiset<std::size_t> seen;
  for (const auto& win : set.windows) {
    EXPECT_EQ(win.size(), 24u);
    seen.insert(win.begin(), win.end());
  }
  EXPECT_EQ(seen.size(), 96u);
  EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), 96u);
  EXPECT_EQ(set.windows[1].front(), 6u);   // top-right window starts at column 6
  EXPECT_EQ(set.windows[2].front(), 48u);  // bottom-left starts at row 4
}

TEST(Partition, GroundStripsAreFullHeightVerticalSlices) {
  const auto set = partition_ground_level(3, 8, 4, 2);
  ASSERT_EQ(set.count(), 4u);
  EXPECT_EQ(set.windows[1], (std::vector<std::size_t>{2, 3, 10, 11, 18, 19}));
  EXPECT_EQ(set.level, 2u);
  EXPECT_THROW(partition_ground_level(3, 10, 4, 0), ConfigError);
}

TEST(Matching, EqualsDoubleLoopOracleIncludingTies) {
  Rng rng(1);
  std::size_t ties = 0;
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = rep % 2 == 0 ? 4 : 9;
    const std::size_t side = n == 4 ? 2 : 3;
    const std::size_t rows = 2 * side, cols = 2 * side;
    const auto bev = oracle::dyadic_map(rng, rows, cols, 3);
    const auto pyr = oracle::dyadic_pyramid(rng, n, 3);
    const auto got = match_windows(reshape(bev, {rows * cols, 3}), partition_bev({rows, cols, n}), pyr,
                                   partition_ground(pyr, n));
    EXPECT_EQ(got.match, oracle::match_by_double_loop(bev, rows, cols, n, pyr)) << "rep " << rep;
    for (std::size_t l = 0; l < 4; ++l)
      for (std::size_t i = 0; i < n; ++i) {
        const auto row = got.scores[l].begin() + static_cast<long>(i * n);
        if (std::count(row, row + static_cast<long>(n), *std::max_element(row, row + static_cast<long>(n))) > 1) ++ties;
      }
  }
  EXPECT_GT(ties, 0u) << "instances should exercise the tie-break";
}

TEST(Matching, TieGoesToLowestStrip) {
  // Every strip identical: all scores equal, so every window takes strip 0.
  Pyramid<double> p;
  for (std::size_t l = 0; l < 4; ++l) p.levels[l] = Tensor<double>::full({1, 4, 2}, 0.5);
  const auto bev = Tensor<double>::full({16, 2}, 1.0);
  const auto a = match_windows(bev, partition_bev({4, 4, 4}), p, partition_ground(p, 4));
  for (const auto& m : a.match) EXPECT_EQ(m, (std::array<std::size_t, 4>{0, 0, 0, 0}));
}

TEST(Matching, ScoreTableAndMatchRange) {
  Rng rng(2);
  const auto pyr = oracle::dyadic_pyramid(rng, 4, 2);
  const auto bev = oracle::dyadic_map(rng, 4, 4, 2);
  const auto a = match_windows(reshape(bev, {16, 2}), partition_bev({4, 4, 4}), pyr, partition_ground(pyr, 4));
  for (std::size_t l = 0; l < 4; ++l) {
    EXPECT_EQ(a.scores[l].size(), 16u);
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_LT(a.match[i][l], 4u);
      for (std::size_t j = 0; j < 4; ++j) EXPECT_LE(a.score(l, i, j), a.score(l, i, a.match[i][l]));
    }
  }
}

TEST(Matching, RecordsNothingOnTheTape) {
  Rng rng(3);
  auto pyr = oracle::dyadic_pyramid(rng, 4, 2);
  for (auto& lvl : pyr.levels) lvl.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  match_windows(oracle::dyadic_map(rng, 16, 2, 1).detach(), partition_bev({4, 4, 4}), pyr, partition_ground(pyr, 4));
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Matching, RollingStripsPermutesAssignmentCyclically) {
  Rng rng(4);
  const auto pyr = oracle::dyadic_pyramid(rng, 4, 3);
  Pyramid<double> rolled;
  for (std::size_t l = 0; l < 4; ++l) rolled.levels[l] = roll_width(pyr.levels[l], static_cast<long>(pyr.levels[l].dim(1) / 4));
  const auto bev = reshape(oracle::dyadic_map(rng, 4, 4, 3), {16, 3});
  const auto a = match_windows(bev, partition_bev({4, 4, 4}), pyr, partition_ground(pyr, 4));
  const auto b = match_windows(bev, partition_bev({4, 4, 4}), rolled, partition_ground(rolled, 4));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t l = 0; l < 4; ++l) {
      // Cyclic shift of ties can move the lowest index; compare scores instead.
      EXPECT_EQ(b.score(l, i, b.match[i][l]), a.score(l, i, a.match[i][l]));
      EXPECT_EQ(a.score(l, i, a.match[i][l]), b.score(l, i, (a.match[i][l] + 1) % 4));
    }
}
