// w2w_bev: gen-data | train | eval | grad-check | inspect
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "w2w/w2w.hpp"

namespace {

struct GlobalFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;  // key=value
  std::string checkpoint;
  std::string out;
};

w2w::RunConfig resolve_config(const GlobalFlags& g) {
  w2w::RunConfig cfg = g.config_path.empty() ? w2w::RunConfig{} : w2w::load_config(g.config_path);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw w2w::ConfigError("--set expects key=value, got '" + kv + "'");
    w2w::set_config_value(cfg, w2w::detail::trim(kv.substr(0, eq)), w2w::detail::trim(kv.substr(eq + 1)));
  }
  if (g.seed) cfg.seed = *g.seed;
  if (!g.checkpoint.empty()) cfg.checkpoint = g.checkpoint;
  cfg.validate();
  return cfg;
}

std::vector<double> parse_fov_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = w2w::detail::trim(item);
    if (!item.empty()) out.push_back(w2w::detail::parse_double("fov", item));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Window-to-window BEV cross-view retrieval on a synthetic world"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand
  GlobalFlags g;
  app.add_option("--config", g.config_path, "key=value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "override the config seed");
  app.add_option("--set", g.overrides, "extra key=value overrides, applied after --config")->take_all();
  app.add_option("--checkpoint", g.checkpoint, "checkpoint path (train: output, eval/inspect: input)");
  app.add_option("--out", g.out, "output directory (train/eval default: the checkpoint's directory)");

  auto* gen = app.add_subcommand("gen-data", "render the synthetic dataset to the config's dataset path");

  auto* train = app.add_subcommand("train", "train and write final + best checkpoints and loss.csv");
  std::string resume;
  train->add_option("--resume", resume, "continue from a checkpoint with optimizer state")->check(CLI::ExistingFile);
  std::string train_fov;
  train->add_option("--fov", train_fov, "training field of view in degrees (overrides the config)");
  std::size_t stop_at = 0;
  train->add_option("--stop-at", stop_at, "stop after this many total steps without shortening the schedule");

  auto* eval = app.add_subcommand("eval", "retrieval report per field of view");
  std::string eval_fovs = "360,180,90,70";
  std::string split = "test";
  eval->add_option("--fov", eval_fovs, "comma-separated list of fields of view")->capture_default_str();
  eval->add_option("--split", split, "train, val or test")->capture_default_str();

  auto* grad = app.add_subcommand("grad-check", "finite-difference check of every differentiable op");
  std::size_t num_seeds = 1;
  std::string fault;
  grad->add_option("--seeds", num_seeds, "number of consecutive seeds to run")->capture_default_str();
  grad->add_option("--inject-fault", fault, "corrupt one op's backward rule")->group("");

  auto* inspect = app.add_subcommand("inspect", "dump matching, attention, depth and BEV tables for one sample");
  std::size_t sample = 0;
  inspect->add_option("--sample", sample, "scene id")->required();
  std::string inspect_fov;
  inspect->add_option("--fov", inspect_fov, "query field of view (overrides the config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? w2w::kExitOk : w2w::kExitUsage;
  }

  try {
    if (*grad) {
      const std::uint64_t seed = g.seed.value_or(resolve_config(g).seed);
      const auto summary = w2w::cmd_grad_check(seed, num_seeds, fault);
      std::cout << summary.to_text();
      if (!g.out.empty()) w2w::detail::open_out(std::filesystem::path(g.out) / "grad_check.txt") << summary.to_text();
      return summary.passed ? w2w::kExitOk : w2w::kExitGradCheck;
    }
    w2w::RunConfig cfg = resolve_config(g);
    if (*gen) {
      w2w::cmd_gen_data(cfg, std::cout);
    } else if (*train) {
      if (!train_fov.empty()) w2w::set_config_value(cfg, "fov", train_fov);
      const std::filesystem::path out =
          g.out.empty() ? std::filesystem::path(cfg.checkpoint).parent_path() : std::filesystem::path(g.out);
      std::optional<std::filesystem::path> from;
      if (!resume.empty()) from = resume;
      w2w::cmd_train(cfg, out.empty() ? "." : out, std::cout, from, stop_at);
    } else if (*eval) {
      const std::filesystem::path out =
          g.out.empty() ? std::filesystem::path(cfg.checkpoint).parent_path() : std::filesystem::path(g.out);
      w2w::cmd_eval(cfg, cfg.checkpoint, parse_fov_list(eval_fovs), out.empty() ? "." : out, std::cout, split);
    } else if (*inspect) {
      if (!inspect_fov.empty()) w2w::set_config_value(cfg, "fov", inspect_fov);
      w2w::cmd_inspect(cfg, cfg.checkpoint, sample, g.out.empty() ? "inspect" : g.out, std::cout);
    }
  } catch (const w2w::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return w2w::kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return w2w::kExitRuntime;
  }
  return w2w::kExitOk;
}
