// The five subcommands as library functions; the CLI only parses flags and
// maps exceptions to exit codes.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "w2w/checkpoint.hpp"
#include "w2w/config.hpp"
#include "w2w/grad_suite.hpp"
#include "w2w/model.hpp"

namespace w2w {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitRuntime = 2, kExitGradCheck = 3 };

using TrainModel = W2WModel<float>;

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

inline std::string fov_tag(double fov) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << fov;
  return os.str();
}

inline Dataset load_dataset_for(const RunConfig& cfg) {
  const std::filesystem::path root(cfg.dataset);
  if (!std::filesystem::exists(root / "manifest.txt")) {
    throw std::runtime_error("dataset not found at " + root.string() + " (run gen-data first)");
  }
  return read_dataset(root);
}

// Smoothed loss logged for step `next - 1`; the log must end exactly there.
inline double last_smoothed(const std::filesystem::path& log_path, std::size_t next) {
  std::ifstream in(log_path);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  const auto c1 = last.find(','), c3 = last.rfind(',');
  if (next == 0 || c1 == std::string::npos || std::stoul(last.substr(0, c1)) + 1 != next) {
    throw std::runtime_error(log_path.string() + " does not end at step " + std::to_string(next - 1) +
                             "; cannot append a resumed run");
  }
  return parse_double("smoothed", last.substr(c3 + 1));
}

}  // namespace detail

// "<dir>/<stem>.best<ext>" next to the final checkpoint.
inline std::filesystem::path best_checkpoint_path(const std::filesystem::path& final_path) {
  auto p = final_path;
  return p.replace_filename(final_path.stem().string() + ".best" + final_path.extension().string());
}

inline void load_model(TrainModel& model, const std::filesystem::path& checkpoint) {
  restore_store(model.params(), read_checkpoint(checkpoint));
}

// ---- gen-data --------------------------------------------------------------

inline DatasetManifest cmd_gen_data(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto m = write_dataset(cfg.dataset, cfg.num_scenes, cfg.splits(), cfg.seed, cfg.world);
  log << "dataset " << cfg.dataset << ": " << cfg.num_scenes << " scenes (train " << m.train << ", val " << m.val
      << ", test " << m.test << "), pano " << cfg.world.pano_height << "x" << cfg.world.pano_width << ", aerial "
      << cfg.world.aerial_size << "x" << cfg.world.aerial_size << ", seed " << cfg.seed << '\n';
  return m;
}

// ---- train -----------------------------------------------------------------

struct TrainOutcome {
  std::size_t first_step = 0;  // > 0 when resumed
  std::vector<double> losses;  // one per step run here
  double best_val_r1 = -1.0;   // -1 when there is no val split
  std::size_t best_step = 0;
  std::filesystem::path final_checkpoint, best_checkpoint, loss_log;
};

// Runs cfg.steps optimizer steps in total. `resume` continues from a
// checkpoint that carries optimizer state; batches depend only on
// (seed, step), so a resumed run retraces the uninterrupted one.
// stop_at > 0 ends the run early at that step, keeping the full schedule.
inline TrainOutcome cmd_train(const RunConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log,
                              const std::optional<std::filesystem::path>& resume = std::nullopt,
                              std::size_t stop_at = 0) {
  cfg.validate();
  const Dataset ds = detail::load_dataset_for(cfg);
  if (ds.train.size() < cfg.batch_size) {
    throw ConfigError("batch_size " + std::to_string(cfg.batch_size) + " exceeds the " +
                      std::to_string(ds.train.size()) + " training pairs in " + cfg.dataset);
  }
  TrainModel model(cfg.model(), cfg.seed);
  AdamW<float> opt(model.params(), {0.9, 0.999, 1e-8, cfg.weight_decay});

  TrainOutcome out;
  out.final_checkpoint = cfg.checkpoint;
  out.best_checkpoint = best_checkpoint_path(cfg.checkpoint);
  out.loss_log = out_dir / "loss.csv";
  if (resume) {
    const auto tensors = read_checkpoint(*resume);
    if (!has_optimizer_state(tensors)) throw CheckpointError(resume->string() + " has no optimizer state to resume");
    restore_store(model.params(), tensors);
    restore_optimizer(opt, tensors);
    out.first_step = opt.steps();
    log << "resumed from " << resume->string() << " at step " << out.first_step << '\n';
  }

  std::filesystem::create_directories(out_dir);
  {
    auto cfg_out = detail::open_out(out_dir / "config.txt");
    cfg_out << cfg.to_text();
  }
  std::ofstream loss_log;
  double smoothed = 0.0;
  if (resume && std::filesystem::exists(out.loss_log)) {
    smoothed = detail::last_smoothed(out.loss_log, out.first_step);
    loss_log.open(out.loss_log, std::ios::app | std::ios::binary);
  } else {
    loss_log = detail::open_out(out.loss_log);
    loss_log << "step,lr,loss,smoothed\n";
  }
  loss_log.imbue(std::locale::classic());
  loss_log << std::setprecision(9);

  const bool has_val = !ds.val.empty();
  auto validate_now = [&](std::size_t step) {
    const auto ref = embed_aerials(model, ds.val);
    const double r1 = evaluate_retrieval(model, ds.val, ref, cfg.fov, cfg.seed).recall(1);
    log << "step " << step << " val R@1 " << std::fixed << std::setprecision(4) << r1 << std::defaultfloat << '\n';
    if (r1 > out.best_val_r1) {
      out.best_val_r1 = r1;
      out.best_step = step;
      write_checkpoint(out.best_checkpoint, snapshot(model.params(), &opt));
    }
  };

  const std::size_t end = stop_at > 0 ? std::min(stop_at, cfg.steps) : cfg.steps;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t step = out.first_step; step < end; ++step) {
    const double lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.min_lr);
    const auto batch = make_batch(ds.train, cfg.batch_size, cfg.fov, cfg.seed, step);
    const double loss = train_step(model, batch, opt, lr, static_cast<float>(cfg.temperature));
    smoothed = step == 0 ? loss : 0.9 * smoothed + 0.1 * loss;
    out.losses.push_back(loss);
    loss_log << step << ',' << lr << ',' << loss << ',' << smoothed << '\n';
    if (step % 50 == 0 || step + 1 == end) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log << "step " << step << " loss " << std::fixed << std::setprecision(4) << loss << " smoothed " << smoothed
          << " lr " << std::scientific << std::setprecision(2) << lr << std::defaultfloat << " ("
          << std::setprecision(1) << std::fixed << secs << " s)" << std::defaultfloat << std::setprecision(6)
          << '\n';
    }
    if (has_val && cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < end) {
      validate_now(step + 1);
    }
  }
  loss_log.flush();

  const auto final_state = snapshot(model.params(), &opt);
  write_checkpoint(out.final_checkpoint, final_state);
  if (has_val) {
    validate_now(end);
  } else {
    // Nothing to select on: best is the final state.
    write_checkpoint(out.best_checkpoint, final_state);
    out.best_step = end;
  }
  log << "final checkpoint " << out.final_checkpoint.string() << ", best " << out.best_checkpoint.string()
      << " (step " << out.best_step << ")\n";
  return out;
}

// ---- eval ------------------------------------------------------------------

struct FovReport {
  double fov = 360.0;
  RetrievalReport report;
};

// Embeds the split's aerials once, then one query set per FoV. Reports are
// written as <out>/eval_<split>_fov<F>.{txt,csv} when `out_dir` is non-empty.
inline std::vector<FovReport> cmd_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                                       const std::vector<double>& fovs, const std::filesystem::path& out_dir,
                                       std::ostream& log, const std::string& split = "test") {
  cfg.validate();
  if (fovs.empty()) throw ConfigError("fov: at least one field of view is required");
  for (double f : fovs)
    if (!(f > 0.0 && f <= 360.0)) throw ConfigError("fov: " + detail::fov_tag(f) + " outside (0, 360]");
  const Dataset ds = detail::load_dataset_for(cfg);
  const std::vector<RenderedPair>* pairs = split == "test"    ? &ds.test
                                           : split == "train" ? &ds.train
                                           : split == "val"   ? &ds.val
                                                              : nullptr;
  if (pairs == nullptr) throw ConfigError("split must be train, val or test, got '" + split + "'");
  if (pairs->empty()) throw std::runtime_error("split '" + split + "' of " + cfg.dataset + " is empty");

  TrainModel model(cfg.model(), cfg.seed);
  load_model(model, checkpoint);
  const auto ref = embed_aerials(model, *pairs);
  std::vector<FovReport> out;
  for (double fov : fovs) {
    FovReport r{fov, evaluate_retrieval(model, *pairs, ref, fov, cfg.seed)};
    log << "== " << split << " split, FoV " << detail::fov_tag(fov) << " ==\n" << r.report.to_text();
    if (!out_dir.empty()) {
      const std::string stem = "eval_" + split + "_fov" + detail::fov_tag(fov);
      detail::open_out(out_dir / (stem + ".txt")) << r.report.to_text();
      detail::open_out(out_dir / (stem + ".csv")) << r.report.to_csv();
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---- grad-check ------------------------------------------------------------

struct GradCheckSummary {
  std::vector<GradCheckReport> ops;  // one per op, worst seed kept
  bool passed = true;
  std::string to_text() const {
    std::ostringstream os;
    os << std::left << std::setw(22) << "op" << std::right << std::setw(14) << "max_rel_err" << std::setw(8)
       << "result" << '\n';
    for (const auto& r : ops) {
      os << std::left << std::setw(22) << r.op << std::right << std::setw(14) << std::scientific
         << std::setprecision(3) << r.max_rel_error << std::setw(8) << (r.passed ? "PASS" : "FAIL") << '\n';
    }
    os << (passed ? "all ops passed" : "gradient check FAILED") << '\n';
    return os.str();
  }
};

// Runs the suite for seeds seed .. seed+num_seeds-1. `fault_op` corrupts the
// backward rule of the named op (test hook).
inline GradCheckSummary cmd_grad_check(std::uint64_t seed, std::size_t num_seeds, const std::string& fault_op = "") {
  if (num_seeds == 0) throw ConfigError("seeds must be at least 1");
  auto& fault = Tape<double>::fault_op();
  const std::string saved = fault;
  fault = fault_op;
  GradCheckSummary s;
  try {
    for (std::size_t k = 0; k < num_seeds; ++k) {
      const auto reports = run_grad_suite(seed + k);
      if (s.ops.empty()) {
        s.ops = reports;
        continue;
      }
      // Keep the worst seed: any failure beats a pass, then the larger error.
      for (std::size_t i = 0; i < reports.size(); ++i) {
        const auto& r = reports[i];
        const bool worse = r.passed != s.ops[i].passed ? !r.passed : r.max_rel_error > s.ops[i].max_rel_error;
        if (worse) s.ops[i] = r;
      }
    }
  } catch (...) {
    fault = saved;
    throw;
  }
  fault = saved;
  for (const auto& r : s.ops) s.passed = s.passed && r.passed;
  return s;
}

// ---- inspect ---------------------------------------------------------------

namespace detail {

inline void dump_table(const std::filesystem::path& base, const std::string& title, const std::vector<double>& v,
                       std::size_t rows, std::size_t cols) {
  auto txt = open_out(base.string() + ".txt");
  txt.imbue(std::locale::classic());
  txt << "# " << title << '\n' << "# " << rows << " rows x " << cols << " cols; heatmap " << base.filename().string()
      << ".pgm is min-max normalized to 0..255\n";
  txt << std::setprecision(6);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) txt << (c ? " " : "") << v[r * cols + c];
    txt << '\n';
  }
  write_pgm(base.string() + ".pgm", heatmap(v, rows, cols), title + ", min-max normalized");
}

}  // namespace detail

struct InspectResult {
  std::vector<std::filesystem::path> files;
};

// Dumps one sample's internals under out_dir. `sample` is a scene id looked
// up in the test, train and val splits in that order. The ground query uses
// cfg.fov with the same roll offset evaluation would draw.
inline InspectResult cmd_inspect(const RunConfig& cfg, const std::filesystem::path& checkpoint, std::size_t sample,
                                 const std::filesystem::path& out_dir, std::ostream& log) {
  namespace fs = std::filesystem;
  cfg.validate();
  const Dataset ds = detail::load_dataset_for(cfg);
  const RenderedPair* pair = nullptr;
  for (const auto* split : {&ds.test, &ds.train, &ds.val})
    for (const auto& p : *split)
      if (pair == nullptr && p.scene_id == sample) pair = &p;
  if (pair == nullptr) throw ConfigError("sample: scene id " + std::to_string(sample) + " not in " + cfg.dataset);

  TrainModel model(cfg.model(), cfg.seed);
  load_model(model, checkpoint);
  NoGradScope<float> no_grad;

  Rng rng(derive_seed(cfg.seed, 0xE7A1, pair->scene_id));
  const std::size_t offset = rng.below(pair->pano.width);
  const GroundInput query{augment_with_offset(pair->pano, cfg.fov, offset).image, cfg.fov >= 360.0};
  GroundTrace<float> trace;
  auto [image, padding] = prepare_ground<float>(query, cfg.windows);
  model.ground_bev(image, padding, &trace);

  fs::create_directories(out_dir);
  InspectResult res;
  const std::size_t n = cfg.windows;
  const std::size_t blocks = trace.encoder.blocks.size();

  {
    auto os = detail::open_out(out_dir / "summary.txt");
    os << "scene " << pair->scene_id << "\nroll " << offset << "\nfov " << detail::fov_tag(cfg.fov)
       << "\nquery " << query.image.height << "x" << query.image.width << " padded to " << image.dim(0) << "x"
       << image.dim(1) << "\nwindows " << n << "\nblocks " << blocks << "\nbev " << cfg.bev_rows << "x"
       << cfg.bev_cols << '\n';
    res.files.push_back(out_dir / "summary.txt");
  }
  write_ppm(out_dir / "query.ppm", query.image);
  write_ppm(out_dir / "aerial.ppm", pair->aerial);

  {
    auto os = detail::open_out(out_dir / "match_table.txt");
    os << "# block window level0 level1 level2 level3  (ground strip index in [0, " << n << "))\n";
    for (std::size_t b = 0; b < blocks; ++b) {
      const auto& a = trace.encoder.blocks[b].assignment;
      for (std::size_t i = 0; i < a.match.size(); ++i) {
        os << b << ' ' << i;
        for (std::size_t l = 0; l < 4; ++l) os << ' ' << a.match[i][l];
        os << '\n';
      }
    }
    res.files.push_back(out_dir / "match_table.txt");
  }

  for (std::size_t b = 0; b < blocks; ++b) {
    const auto& bt = trace.encoder.blocks[b];
    for (std::size_t l = 0; l < 4; ++l) {
      const auto base = out_dir / ("scores_b" + std::to_string(b) + "_l" + std::to_string(l));
      detail::dump_table(base, "block " + std::to_string(b) + " level " + std::to_string(l) +
                                   " window scores, rows = BEV windows, cols = ground strips",
                         bt.assignment.scores[l], n, n);
      res.files.push_back(base.string() + ".txt");
    }
    for (std::size_t i = 0; i < bt.cross.size(); ++i) {
      for (std::size_t l = 0; l < 4; ++l) {
        const auto& m = bt.cross[i][l];
        const auto base = out_dir / ("cross_b" + std::to_string(b) + "_w" + std::to_string(i) + "_l" +
                                     std::to_string(l));
        detail::dump_table(base, "block " + std::to_string(b) + " window " + std::to_string(i) + " level " +
                                     std::to_string(l) + " cross-attention, rows = window tokens, cols = strip tokens",
                           m.weights, m.queries, m.keys);
        res.files.push_back(base.string() + ".txt");
      }
    }
    const auto base = out_dir / ("self_b" + std::to_string(b));
    detail::dump_table(base, "block " + std::to_string(b) + " self-attention, rows = queries, cols = keys",
                       bt.self.weights, bt.self.queries, bt.self.keys);
    res.files.push_back(base.string() + ".txt");
  }

  if (trace.depth.probs.size() > 0) {
    // Column x depth marginal: mean over image rows.
    const std::size_t h = trace.depth.probs.dim(0), w = trace.depth.probs.dim(1), d = trace.depth.probs.dim(2);
    std::vector<double> marg(w * d, 0.0);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t k = 0; k < d; ++k)
          marg[x * d + k] += static_cast<double>(trace.depth.probs[(y * w + x) * d + k]) / static_cast<double>(h);
    const auto base = out_dir / "depth_marginals";
    detail::dump_table(base, "depth probability averaged over rows, rows = feature columns, cols = depth bins", marg, w,
                       d);
    res.files.push_back(base.string() + ".txt");
  }

  {
    const std::size_t rows = trace.bev.dim(0), cols = trace.bev.dim(1), c = trace.bev.dim(2);
    std::vector<double> norms(rows * cols, 0.0);
    for (std::size_t t = 0; t < rows * cols; ++t) {
      double sq = 0.0;
      for (std::size_t k = 0; k < c; ++k) sq += static_cast<double>(trace.bev[t * c + k]) * trace.bev[t * c + k];
      norms[t] = std::sqrt(sq);
    }
    const auto base = out_dir / "bev_norm";
    detail::dump_table(base, "L2 norm of each final BEV token", norms, rows, cols);
    res.files.push_back(base.string() + ".txt");
  }
  log << "inspect: scene " << pair->scene_id << ", " << res.files.size() << " tables written to " << out_dir.string()
      << '\n';
  return res;
}

}  // namespace w2w
