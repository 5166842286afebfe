// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "oracles.hpp"
#include "w2w/w2w.hpp"

using namespace w2w;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

Tensor<double> rand_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

std::vector<std::vector<double>> rows_of(const Tensor<double>& t) {
  std::vector<std::vector<double>> out(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) out[i][j] = t[i * t.dim(1) + j];
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_op, failed;
  for (std::uint64_t seed = 1; seed <= 20; ++seed)
    for (const auto& r : run_grad_suite(seed)) {
      if (r.max_rel_error > worst) {
        worst = r.max_rel_error;
        worst_op = r.op;
      }
      if (!r.passed && failed.empty()) failed = r.op + " (seed " + std::to_string(seed) + ")";
    }
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = failed.empty() && t <= 60.0;
  o.detail = std::to_string(grad_suite_names().size()) + " checks x 20 seeds, worst rel err " + fmt(worst) + " (" +
             worst_op + "), " + fmt(t, 3) + " s";
  if (!failed.empty()) o.detail += ", first failure " + failed;
  return o;
}

Outcome matching_oracle() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  std::size_t mismatches = 0, ties = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = rep % 2 == 0 ? 4 : 9, side = n == 4 ? 2 : 3;
    const std::size_t rows = 2 * side, cols = 2 * side;
    const auto bev = oracle::dyadic_map(rng, rows, cols, 3);
    const auto pyr = oracle::dyadic_pyramid(rng, n, 3);
    const auto got =
        match_windows(reshape(bev, {rows * cols, 3}), partition_bev({rows, cols, n}), pyr, partition_ground(pyr, n));
    if (got.match != oracle::match_by_double_loop(bev, rows, cols, n, pyr)) ++mismatches;
    for (std::size_t l = 0; l < 4; ++l)
      for (std::size_t i = 0; i < n; ++i) {
        const auto row = got.scores[l].begin() + static_cast<long>(i * n);
        const auto best = *std::max_element(row, row + static_cast<long>(n));
        if (std::count(row, row + static_cast<long>(n), best) > 1) ++ties;
      }
  }
  const double t = seconds_since(t0);
  return {mismatches == 0 && t <= 10.0, "1000 instances, " + std::to_string(mismatches) + " mismatches, " +
                                            std::to_string(ties) + " tied rows, " + fmt(t, 3) + " s"};
}

Outcome roll_equivariance() {
  // Production encoder shape: 32 channels, 16x16 grid, 4 windows, 3 blocks.
  EncoderConfig cfg;
  cfg.num_blocks = 3;
  cfg.num_heads = 4;
  cfg.ffn_expansion = 4;
  cfg.geometry = {16, 16, 4};
  const std::size_t c = 32, n = 4;
  ParamStore<double> store;
  Rng rng(77);
  const BevEncoder<double> enc(cfg, c, store, rng);
  const auto grid_tokens = rand_tensor(rng, {16, 16, c});
  double worst = 0.0;
  std::size_t bad_assign = 0;
  for (int rep = 0; rep < 100; ++rep) {
    Pyramid<double> pyr, rolled;
    for (std::size_t l = 0; l < 4; ++l) {
      pyr.levels[l] = rand_tensor(rng, {std::size_t{2} << l, std::size_t{8} << l, c});
      rolled.levels[l] = roll_width(pyr.levels[l], static_cast<long>(pyr.levels[l].dim(1) / n));
    }
    EncoderTrace ta, tb;
    const auto a = enc.encode({grid_tokens, cfg.geometry}, pyr, &ta);
    const auto b = enc.encode({grid_tokens, cfg.geometry}, rolled, &tb);
    worst = std::max(worst, max_abs_diff(a, b));
    for (std::size_t blk = 0; blk < cfg.num_blocks; ++blk)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t l = 0; l < 4; ++l)
          if (tb.blocks[blk].assignment.match[i][l] != (ta.blocks[blk].assignment.match[i][l] + 1) % n) ++bad_assign;
  }
  return {worst <= 1e-5 && bad_assign == 0,
          "100 pyramids, max |dBEV| " + fmt(worst) + ", " + std::to_string(bad_assign) + " non-cyclic assignments"};
}

Outcome lift_identities() {
  // 10^4 pixels: a 50 x 200 C4 map.
  Rng rng(4);
  const std::size_t h = 50, w = 200, c = 8, d = 16;
  const auto c4 = rand_tensor(rng, {h, w, c}, -3.0, 3.0);
  const auto depth = predict_depth(c4, rand_tensor(rng, {c, d}, -2.0, 2.0), rand_tensor(rng, {d}));
  const auto vol = lift_to_3d(c4, depth);
  double sum_err = 0.0, lift_err = 0.0;
  for (std::size_t p = 0; p < h * w; ++p) {
    double s = 0.0;
    for (std::size_t b = 0; b < d; ++b) s += depth.probs[p * d + b];
    sum_err = std::max(sum_err, std::abs(s - 1.0));
    for (std::size_t k = 0; k < c; ++k) {
      double acc = 0.0;
      for (std::size_t b = 0; b < d; ++b) acc += vol[(p * d + b) * c + k];
      lift_err = std::max(lift_err, std::abs(acc - c4[p * c + k]));
    }
  }
  return {sum_err <= 1e-6 && lift_err <= 1e-6,
          "10000 pixels, max |sum p - 1| " + fmt(sum_err) + ", max |sum lift - C4| " + fmt(lift_err)};
}

Outcome loss_metric_oracles() {
  Rng rng(5);
  double nce_err = 0.0, single = 0.0, same_err = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const auto g = l2_normalize_rows(rand_tensor(rng, {4, 16})), a = l2_normalize_rows(rand_tensor(rng, {4, 16}));
    nce_err = std::max(nce_err,
                       std::abs(infonce(g, a, 0.05).item() - oracle::infonce_scalar(rows_of(g), rows_of(a), 0.05)));
  }
  const auto one = l2_normalize_rows(rand_tensor(rng, {1, 16}));
  single = std::abs(infonce(one, l2_normalize_rows(rand_tensor(rng, {1, 16})), 0.05).item());
  for (std::size_t b : {2u, 4u, 16u}) {
    const auto same = concat_rows(std::vector<Tensor<double>>(b, one));
    same_err = std::max(same_err, std::abs(infonce(same, same, 0.05).item() - std::log(double(b))));
  }
  std::size_t recall_mismatch = 0;
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> gv(30), av(30);
    for (auto& x : gv) x = double(rng.below(3));
    for (auto& x : av) x = double(rng.below(3));
    std::vector<std::size_t> truth(10);
    for (auto& t : truth) t = rng.below(10);
    const auto r = recall_at_k(Tensor<double>({10, 3}, gv), Tensor<double>({10, 3}, av), truth, {1, 3, 5, 10});
    std::vector<std::vector<double>> table(10, std::vector<double>(10, 0.0));
    for (std::size_t i = 0; i < 10; ++i)
      for (std::size_t j = 0; j < 10; ++j)
        for (std::size_t k = 0; k < 3; ++k) table[i][j] += gv[i * 3 + k] * av[j * 3 + k];
    if (r.hits != oracle::recall_hits(table, truth, {1, 3, 5, 10})) ++recall_mismatch;
  }
  return {nce_err <= 1e-6 && single <= 1e-6 && same_err <= 1e-6 && recall_mismatch == 0,
          "infonce err " + fmt(nce_err) + ", B=1 " + fmt(single) + ", ln B err " + fmt(same_err) + ", recall " +
              std::to_string(recall_mismatch) + "/100 table mismatches"};
}

// Desk-scale run: 256 scenes, FoV 90 training with unknown orientation.
constexpr const char* kDeskConfig =
    "num_scenes = 256\n"
    "train_fraction = 0.75\n"
    "val_fraction = 0\n"
    "test_fraction = 0.25\n"
    "fov = 90\n"
    "bev_rows = 8\n"
    "bev_cols = 8\n"
    "depth_bins = 8\n"
    "num_blocks = 1\n"
    "shared_backbone = true\n"
    "steps = 1500\n"
    "batch_size = 16\n"
    "lr = 0.001\n"
    "min_lr = 0.00001\n"
    "seed = 1\n";

Outcome training_trend(const fs::path& out, std::ostream& log) {
  auto cfg = parse_config(kDeskConfig);
  cfg.dataset = (out / "data").string();
  cfg.checkpoint = (out / "full" / "model.w2wb").string();
  cmd_gen_data(cfg, log);

  auto t0 = Clock::now();
  cmd_train(cfg, out / "full", log);
  const double t_full = seconds_since(t0);
  const auto full = cmd_eval(cfg, cfg.checkpoint, {360.0, 90.0, 70.0}, out / "full", log);

  auto ablation = cfg;
  ablation.bev_init_enabled = false;
  ablation.checkpoint = (out / "no_bev_init" / "model.w2wb").string();
  t0 = Clock::now();
  cmd_train(ablation, out / "no_bev_init", log);
  const double t_abl = seconds_since(t0);
  const auto abl = cmd_eval(ablation, ablation.checkpoint, {90.0}, out / "no_bev_init", log);

  const double r360 = full[0].report.recall(1), r90 = full[1].report.recall(1), r70 = full[2].report.recall(1);
  const double r90_abl = abl[0].report.recall(1);
  const bool a = r90 >= 0.70, b = r90 > r90_abl, c = r360 >= r90 && r90 >= r70;
  const bool budget = t_full <= 900.0 && t_abl <= 900.0;
  std::string d = std::string("(a) ") + (a ? "ok" : "MISS") + " R@1@90=" + fmt(r90, 3) + " (target 0.70); (b) " +
                  (b ? "ok" : "MISS") + " full " + fmt(r90, 3) + " vs no-bev-init " + fmt(r90_abl, 3) + "; (c) " +
                  (c ? "ok" : "MISS") + " 360/90/70 = " + fmt(r360, 3) + "/" + fmt(r90, 3) + "/" + fmt(r70, 3) +
                  "; train " + fmt(t_full, 4) + " s + " + fmt(t_abl, 4) + " s" + (budget ? "" : " OVER BUDGET");
  return {a && b && c && budget, d};
}

Outcome determinism(const fs::path& out, std::ostream& log) {
  auto base = parse_config(
      "model_channels = 8\ndepth_bins = 4\nembed_dim = 8\nbackbone_channels = 4,4,6,8\nnum_blocks = 1\n"
      "num_heads = 2\nffn_expansion = 2\nbev_rows = 4\nbev_cols = 4\npano_height = 16\npano_width = 64\n"
      "aerial_size = 32\nrange_max = 14\nfootprint_min = 1.5\nfootprint_max = 2.5\nlandmarks = 4\n"
      "num_scenes = 24\nbatch_size = 4\nsteps = 8\n");
  std::string ckpt[2], report[2], data[2];
  for (int run = 0; run < 2; ++run) {
    const auto dir = out / ("run" + std::to_string(run));
    fs::remove_all(dir);
    auto cfg = base;
    cfg.dataset = (dir / "data").string();
    cfg.checkpoint = (dir / "model.w2wb").string();
    cmd_gen_data(cfg, log);
    cmd_train(cfg, dir, log);
    cmd_eval(cfg, cfg.checkpoint, {360.0, 90.0}, dir, log);
    ckpt[run] = slurp(cfg.checkpoint);
    report[run] = slurp(dir / "eval_test_fov90.txt") + slurp(dir / "eval_test_fov360.csv") + slurp(dir / "loss.csv");
    data[run] = slurp(dir / "data" / "manifest.txt");
  }
  // Round trip: restore into a fresh model and re-encode.
  TrainModel model(base.model(), 999);
  const auto tensors = read_checkpoint(out / "run0" / "model.w2wb");
  restore_store(model.params(), tensors);
  AdamW<float> opt(model.params(), {});
  restore_optimizer(opt, tensors);
  const auto again = encode_checkpoint(snapshot(model.params(), &opt));
  const bool round_trip = std::string(again.begin(), again.end()) == ckpt[0];
  const bool same = ckpt[0] == ckpt[1] && report[0] == report[1] && data[0] == data[1] && !ckpt[0].empty();
  return {same && round_trip, std::string("checkpoints ") + (ckpt[0] == ckpt[1] ? "identical" : "DIFFER") +
                                  ", reports " + (report[0] == report[1] ? "identical" : "DIFFER") + ", round trip " +
                                  (round_trip ? "bit-exact" : "MISMATCH")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance run"};
  std::string out = "acceptance_run";
  std::vector<int> only;
  app.add_option("--out", out, "scratch directory for datasets, checkpoints and reports")->capture_default_str();
  app.add_option("--only", only, "run only these criteria");
  CLI11_PARSE(app, argc, argv);

  const fs::path root(out);
  fs::create_directories(root);
  std::ofstream log(root / "acceptance.log");

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"matching oracle", matching_oracle},
      {"roll equivariance", roll_equivariance},
      {"lift identities", lift_identities},
      {"loss/metric oracles", loss_metric_oracles},
      {"desk-scale training trend", [&] { return training_trend(root / "trend", log); }},
      {"determinism and persistence", [&] { return determinism(root / "determinism", log); }},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << ": " << o.detail << std::endl;
  }
  return all ? 0 : 1;
}
