// Flat key=value run configuration: one pair per line, '#' starts a comment.
#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <locale>
#include <sstream>
#include <string>
#include <vector>

#include "w2w/model.hpp"
#include "w2w/synthetic.hpp"

namespace w2w {

struct RunConfig {
  // model
  std::size_t model_channels = 32;
  std::size_t depth_bins = 16;
  std::size_t bev_rows = 16;
  std::size_t bev_cols = 16;
  std::size_t windows = 4;
  std::size_t num_blocks = 3;
  std::size_t num_heads = 4;
  std::size_t ffn_expansion = 4;
  std::size_t embed_dim = 64;
  std::array<std::size_t, 4> backbone_channels{16, 24, 32, 48};
  bool bev_init_enabled = true;
  bool shared_backbone = false;
  HeightCollapse height_collapse = HeightCollapse::max;

  // training
  double temperature = 0.05;
  double lr = 1e-3;
  double min_lr = 1e-5;
  double weight_decay = 0.01;
  std::size_t steps = 600;
  std::size_t batch_size = 16;
  double fov = 90.0;
  std::size_t eval_every = 0;  // validation R@1 cadence in steps; 0 = only at the end
  std::uint64_t seed = 1;

  // data
  std::size_t num_scenes = 256;
  double train_fraction = 0.75;
  double val_fraction = 0.0;
  double test_fraction = 0.25;
  WorldConfig world;

  std::string dataset = "data";
  std::string checkpoint = "checkpoints/model.w2wb";

  ModelConfig model() const {
    ModelConfig m;
    m.model_channels = model_channels;
    m.depth_bins = depth_bins;
    m.embed_dim = embed_dim;
    m.backbone_channels = backbone_channels;
    m.encoder.num_blocks = num_blocks;
    m.encoder.num_heads = num_heads;
    m.encoder.ffn_expansion = ffn_expansion;
    m.encoder.geometry = {bev_rows, bev_cols, windows};
    m.bev_init_enabled = bev_init_enabled;
    m.shared_backbone = shared_backbone;
    m.height_collapse = height_collapse;
    return m;
  }

  SplitFractions splits() const { return {train_fraction, val_fraction, test_fraction}; }

  // Throws ConfigError naming the offending key.
  void validate() const;

  // Canonical text form; parse(to_text()) reproduces the config.
  std::string to_text() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  is.imbue(std::locale::classic());
  double out = 0.0;
  if (!(is >> out) || !is.eof() || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a finite number, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << std::setprecision(17) << v;
  return os.str();
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename M>
Field size_field(const std::string& key, M member) {
  return {[key, member](RunConfig& c, const std::string& v) { member(c) = parse_size(key, v); },
          [member](const RunConfig& c) { return std::to_string(member(c)); }};
}

template <typename M>
Field double_field(const std::string& key, M member) {
  return {[key, member](RunConfig& c, const std::string& v) { member(c) = parse_double(key, v); },
          [member](const RunConfig& c) { return format_double(member(c)); }};
}

template <typename M>
Field bool_field(const std::string& key, M member) {
  return {[key, member](RunConfig& c, const std::string& v) { member(c) = parse_bool(key, v); },
          [member](const RunConfig& c) { return std::string(member(c) ? "true" : "false"); }};
}

template <typename M>
Field string_field(M member) {
  return {[member](RunConfig& c, const std::string& v) { member(c) = v; },
          [member](const RunConfig& c) { return member(c); }};
}

#define W2W_REF(expr) [](auto& c) -> auto& { return c.expr; }

// Ordered key table; the order is the canonical to_text() order.
inline const std::vector<std::pair<std::string, Field>>& config_fields() {
  static const std::vector<std::pair<std::string, Field>> fields = [] {
    std::vector<std::pair<std::string, Field>> f;
    f.emplace_back("model_channels", size_field("model_channels", W2W_REF(model_channels)));
    f.emplace_back("depth_bins", size_field("depth_bins", W2W_REF(depth_bins)));
    f.emplace_back("bev_rows", size_field("bev_rows", W2W_REF(bev_rows)));
    f.emplace_back("bev_cols", size_field("bev_cols", W2W_REF(bev_cols)));
    f.emplace_back("windows", size_field("windows", W2W_REF(windows)));
    f.emplace_back("num_blocks", size_field("num_blocks", W2W_REF(num_blocks)));
    f.emplace_back("num_heads", size_field("num_heads", W2W_REF(num_heads)));
    f.emplace_back("ffn_expansion", size_field("ffn_expansion", W2W_REF(ffn_expansion)));
    f.emplace_back("embed_dim", size_field("embed_dim", W2W_REF(embed_dim)));
    f.emplace_back("backbone_channels",
                   Field{[](RunConfig& c, const std::string& v) {
                           std::stringstream ss(v);
                           std::string item;
                           std::vector<std::size_t> parts;
                           while (std::getline(ss, item, ',')) parts.push_back(parse_size("backbone_channels", trim(item)));
                           if (parts.size() != 4) {
                             throw ConfigError("backbone_channels: expected 4 comma-separated widths, got '" + v + "'");
                           }
                           std::copy(parts.begin(), parts.end(), c.backbone_channels.begin());
                         },
                         [](const RunConfig& c) {
                           std::string s;
                           for (std::size_t i = 0; i < 4; ++i) s += (i ? "," : "") + std::to_string(c.backbone_channels[i]);
                           return s;
                         }});
    f.emplace_back("bev_init_enabled", bool_field("bev_init_enabled", W2W_REF(bev_init_enabled)));
    f.emplace_back("shared_backbone", bool_field("shared_backbone", W2W_REF(shared_backbone)));
    f.emplace_back("height_collapse",
                   Field{[](RunConfig& c, const std::string& v) {
                           if (v == "max") c.height_collapse = HeightCollapse::max;
                           else if (v == "avg") c.height_collapse = HeightCollapse::avg;
                           else throw ConfigError("height_collapse: expected max or avg, got '" + v + "'");
                         },
                         [](const RunConfig& c) {
                           return std::string(c.height_collapse == HeightCollapse::max ? "max" : "avg");
                         }});
    f.emplace_back("temperature", double_field("temperature", W2W_REF(temperature)));
    f.emplace_back("lr", double_field("lr", W2W_REF(lr)));
    f.emplace_back("min_lr", double_field("min_lr", W2W_REF(min_lr)));
    f.emplace_back("weight_decay", double_field("weight_decay", W2W_REF(weight_decay)));
    f.emplace_back("steps", size_field("steps", W2W_REF(steps)));
    f.emplace_back("batch_size", size_field("batch_size", W2W_REF(batch_size)));
    f.emplace_back("fov", double_field("fov", W2W_REF(fov)));
    f.emplace_back("eval_every", size_field("eval_every", W2W_REF(eval_every)));
    f.emplace_back("seed", size_field("seed", W2W_REF(seed)));
    f.emplace_back("num_scenes", size_field("num_scenes", W2W_REF(num_scenes)));
    f.emplace_back("train_fraction", double_field("train_fraction", W2W_REF(train_fraction)));
    f.emplace_back("val_fraction", double_field("val_fraction", W2W_REF(val_fraction)));
    f.emplace_back("test_fraction", double_field("test_fraction", W2W_REF(test_fraction)));
    f.emplace_back("pano_height", size_field("pano_height", W2W_REF(world.pano_height)));
    f.emplace_back("pano_width", size_field("pano_width", W2W_REF(world.pano_width)));
    f.emplace_back("aerial_size", size_field("aerial_size", W2W_REF(world.aerial_size)));
    f.emplace_back("landmarks", size_field("landmarks", W2W_REF(world.landmarks)));
    f.emplace_back("color_levels", size_field("color_levels", W2W_REF(world.color_levels)));
    f.emplace_back("range_min", double_field("range_min", W2W_REF(world.range_min)));
    f.emplace_back("range_max", double_field("range_max", W2W_REF(world.range_max)));
    f.emplace_back("footprint_min", double_field("footprint_min", W2W_REF(world.footprint_min)));
    f.emplace_back("footprint_max", double_field("footprint_max", W2W_REF(world.footprint_max)));
    f.emplace_back("dataset", string_field(W2W_REF(dataset)));
    f.emplace_back("checkpoint", string_field(W2W_REF(checkpoint)));
    return f;
  }();
  return fields;
}

#undef W2W_REF

}  // namespace detail

// Applies one key=value pair; unknown keys are rejected.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& [name, field] : detail::config_fields()) {
    if (name == key) {
      field.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

// Parses config text on top of `base`. Does not validate.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [name, field] : detail::config_fields()) out += name + " = " + field.get(*this) + "\n";
  return out;
}

inline void RunConfig::validate() const {
  auto positive = [](const char* key, std::size_t v) {
    if (v == 0) throw ConfigError(std::string(key) + " must be positive");
  };
  positive("model_channels", model_channels);
  positive("depth_bins", depth_bins);
  positive("bev_rows", bev_rows);
  positive("bev_cols", bev_cols);
  positive("windows", windows);
  positive("num_heads", num_heads);
  positive("ffn_expansion", ffn_expansion);
  positive("embed_dim", embed_dim);
  positive("batch_size", batch_size);
  positive("num_scenes", num_scenes);
  positive("landmarks", world.landmarks);
  for (auto c : backbone_channels) positive("backbone_channels", c);

  const std::size_t side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(windows))));
  if (side * side != windows) throw ConfigError("windows must be a perfect square, got " + std::to_string(windows));
  if (bev_rows % side != 0) {
    throw ConfigError("bev_rows=" + std::to_string(bev_rows) + " must be divisible by sqrt(windows)=" +
                      std::to_string(side));
  }
  if (bev_cols % side != 0) {
    throw ConfigError("bev_cols=" + std::to_string(bev_cols) + " must be divisible by sqrt(windows)=" +
                      std::to_string(side));
  }
  if (model_channels % num_heads != 0) {
    throw ConfigError("num_heads=" + std::to_string(num_heads) + " must divide model_channels=" +
                      std::to_string(model_channels));
  }
  if (world.pano_height == 0 || world.pano_height % kInputDivisor != 0) {
    throw ConfigError("pano_height=" + std::to_string(world.pano_height) + " must be a positive multiple of 16");
  }
  const std::size_t multiple = ground_width_multiple(windows);
  if (world.pano_width == 0 || world.pano_width % multiple != 0) {
    throw ConfigError("pano_width=" + std::to_string(world.pano_width) + " must be a positive multiple of " +
                      std::to_string(multiple) + " (16 * windows)");
  }
  if (world.aerial_size == 0 || world.aerial_size % kInputDivisor != 0) {
    throw ConfigError("aerial_size=" + std::to_string(world.aerial_size) + " must be a positive multiple of 16");
  }
  if (world.landmarks < 3) throw ConfigError("landmarks must be at least 3");
  if (world.color_levels == 1 || world.color_levels > 256) {
    throw ConfigError("color_levels must be 0 (continuous) or in [2, 256]");
  }
  if (!(world.range_min > 0.0 && world.range_min < world.range_max)) {
    throw ConfigError("range_min must be positive and below range_max");
  }
  if (!(world.footprint_min > 0.0 && world.footprint_min <= world.footprint_max)) {
    throw ConfigError("footprint_min must be positive and at most footprint_max");
  }
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (min_lr < 0.0 || min_lr > lr) throw ConfigError("min_lr must lie in [0, lr]");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (!(fov > 0.0 && fov <= 360.0)) throw ConfigError("fov must lie in (0, 360]");
  if (train_fraction < 0.0 || val_fraction < 0.0 || test_fraction < 0.0 ||
      std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
    throw ConfigError("train_fraction + val_fraction + test_fraction must sum to 1");
  }
}

}  // namespace w2w
