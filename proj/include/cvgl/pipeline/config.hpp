#pragma once

// run.cfg: a flat "key = value" file. Every key has a default; unknown keys
// are errors. format_config() writes the file with every key and a comment,
// and is what run directories store as config.snapshot.

#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "cvgl/core.hpp"
#include "cvgl/encoder/augment.hpp"
#include "cvgl/encoder/loss.hpp"
#include "cvgl/encoder/model.hpp"
#include "cvgl/io.hpp"

namespace cvgl {

struct PipelineConfig {
  // World: an existing directory written by `synth gen`, or generated in
  // memory from the settings below when empty.
  std::string world;
  std::uint64_t world_seed = 7;
  std::size_t world_scenes = 500;
  double val_fraction = 0.2;
  std::size_t pano_height = 64;
  std::size_t bev_size = 64;
  double fov = 0.7854;
  std::string gap_preset = "mild";
  int shift_max = 0;
  bool rotate = false;

  // Encoder.
  std::size_t ground_grid_rows = 16, ground_grid_cols = 32;
  std::size_t overhead_grid_rows = 8, overhead_grid_cols = 8;
  std::vector<std::size_t> widths{256, 128};

  // Loss.
  double inv_temperature = 14.285;
  double label_smoothing = 0.1;
  bool symmetric = true;

  // Intra-view augmentation. Crops and flips move content across pooling
  // cells, and the pooled-grid towers lose the layout the cross term needs,
  // so the default views differ by a small photometric jitter only.
  AugmentationConfig augment{0.0, 1.0, 1.0, 0.01, 0.01, 0.01, 0.0, 0};

  // Schedule. The reference schedule is 40 cold-start and 60 semi-supervised
  // epochs; these are desk-scale defaults.
  int intra_epochs = 10;
  int cross_epochs = 20;
  int semi_epochs = 30;
  int refresh_every = 5;
  double tau0 = 0.05;
  double tau_min = 0.0;
  int rounds = -1;  // -1: semi_epochs / refresh_every
  bool one_sided = false;
  double gt_ratio = 0.0;
  double cross_weight = 10.0;
  std::size_t batch_size = 32;
  std::size_t unlabeled_pad = 32;
  double lr = 1e-3;        // cold start
  double semi_lr = 1e-3;   // pseudo-label epochs
  bool lr_decay = true;    // semi_lr falls linearly to zero over the semi epochs
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
  std::string init_model;

  // Evaluation.
  std::vector<std::size_t> eval_ks{1, 5, 10};
  double eval_percent = 1.0;

  int curriculum_rounds() const { return rounds >= 0 ? rounds : (refresh_every > 0 ? semi_epochs / refresh_every : 0); }

  TowerSpec ground_spec() const { return {ground_grid_rows, ground_grid_cols, 3, widths}; }
  TowerSpec overhead_spec() const { return {overhead_grid_rows, overhead_grid_cols, 3, widths}; }

  LossConfig loss() const { return {std::log(inv_temperature), label_smoothing, symmetric}; }

  void validate() const {
    const auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
    if (world_scenes < 2) fail("world_scenes must be at least 2");
    if (!(val_fraction > 0 && val_fraction < 1)) fail("val_fraction must lie in (0, 1)");
    if (intra_epochs < 0 || cross_epochs < 0 || semi_epochs < 0) fail("epoch counts must be >= 0");
    if (refresh_every <= 0) fail("refresh_every must be positive");
    if (semi_epochs % refresh_every != 0) fail("refresh_every must divide semi_epochs");
    if (curriculum_rounds() > semi_epochs / refresh_every) fail("rounds exceeds the number of refresh points");
    if (!(tau0 >= 0 && tau_min >= 0 && tau_min <= tau0)) fail("need 0 <= tau_min <= tau0");
    if (!(gt_ratio >= 0 && gt_ratio <= 1)) fail("gt_ratio must lie in [0, 1]");
    if (cross_weight < 0) fail("cross_weight must be >= 0");
    if (batch_size < 2) fail("batch_size must be at least 2");
    if (!(lr > 0) || !(semi_lr > 0) || weight_decay < 0) fail("need lr, semi_lr > 0 and weight_decay >= 0");
    if (!(inv_temperature > 0)) fail("inv_temperature must be positive");
    if (widths.empty()) fail("widths must name at least one layer");
    if (eval_ks.empty()) fail("eval_ks must not be empty");
    for (std::size_t k : eval_ks)
      if (k == 0) fail("eval_ks entries must be positive");
    if (!(eval_percent > 0 && eval_percent <= 100)) fail("eval_percent must lie in (0, 100]");
    if (ground_grid_rows == 0 || ground_grid_cols == 0 || overhead_grid_rows == 0 || overhead_grid_cols == 0)
      fail("patch grids must be non-empty");
    loss().validate();
    augment.validate();
  }

  std::uint64_t hash() const;
};

namespace detail {

inline std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// Whole-string numeric parses; trailing text, signs on unsigned values and
// out-of-range values are errors.
inline double to_double(const std::string& v) {
  std::size_t used = 0;
  const double d = std::stod(v, &used);
  if (used != v.size()) throw std::invalid_argument(v);
  return d;
}

inline std::uint64_t to_u64(const std::string& v) {
  std::size_t used = 0;
  if (v.empty() || v[0] == '-' || v[0] == '+') throw std::invalid_argument(v);
  const auto u = std::stoull(v, &used);
  if (used != v.size()) throw std::invalid_argument(v);
  return u;
}

inline int to_int(const std::string& v) {
  std::size_t used = 0;
  const int i = std::stoi(v, &used);
  if (used != v.size()) throw std::invalid_argument(v);
  return i;
}

inline std::vector<std::size_t> parse_list(const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(to_u64(tok));
  if (out.empty()) throw std::invalid_argument(v);
  return out;
}

inline std::pair<std::size_t, std::size_t> parse_grid(const std::string& v) {
  const auto x = v.find('x');
  if (x == std::string::npos) throw ConfigError("config: grid must look like RxC, got " + v);
  try {
    return {to_u64(v.substr(0, x)), to_u64(v.substr(x + 1))};
  } catch (const std::logic_error&) {
    throw ConfigError("config: grid must look like RxC, got " + v);
  }
}

inline bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError("config: expected a boolean, got " + v);
}

inline std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

struct ConfigKey {
  const char* name;
  const char* doc;
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&)> set;
};

inline const std::vector<ConfigKey>& config_keys() {
  using C = PipelineConfig;
  using S = const std::string&;
  static const std::vector<ConfigKey> keys = {
      {"world", "world directory from `synth gen`; empty generates one in memory",
       [](const C& c) { return c.world; }, [](C& c, S v) { c.world = v; }},
      {"world_seed", "seed of the generated world", [](const C& c) { return std::to_string(c.world_seed); },
       [](C& c, S v) { c.world_seed = to_u64(v); }},
      {"world_scenes", "scene count of the generated world", [](const C& c) { return std::to_string(c.world_scenes); },
       [](C& c, S v) { c.world_scenes = to_u64(v); }},
      {"val_fraction", "share of scenes held out for validation", [](const C& c) { return fmt(c.val_fraction); },
       [](C& c, S v) { c.val_fraction = to_double(v); }},
      {"pano_height", "panorama height (width is twice this)", [](const C& c) { return std::to_string(c.pano_height); },
       [](C& c, S v) { c.pano_height = to_u64(v); }},
      {"bev_size", "overhead tile side in pixels", [](const C& c) { return std::to_string(c.bev_size); },
       [](C& c, S v) { c.bev_size = to_u64(v); }},
      {"fov", "projection field-of-view angle in radians", [](const C& c) { return fmt(c.fov); },
       [](C& c, S v) { c.fov = to_double(v); }},
      {"gap_preset", "domain gap applied to fakes: none, mild or hard", [](const C& c) { return c.gap_preset; },
       [](C& c, S v) { c.gap_preset = v; }},
      {"shift_max", "cyclic shift of fakes in pixels", [](const C& c) { return std::to_string(c.shift_max); },
       [](C& c, S v) { c.shift_max = to_int(v); }},
      {"rotate", "random 90-degree rotation of fakes", [](const C& c) { return std::string(c.rotate ? "1" : "0"); },
       [](C& c, S v) { c.rotate = parse_bool(v); }},
      {"ground_grid", "pooling grid of the ground tower, RxC",
       [](const C& c) { return std::to_string(c.ground_grid_rows) + "x" + std::to_string(c.ground_grid_cols); },
       [](C& c, S v) { std::tie(c.ground_grid_rows, c.ground_grid_cols) = parse_grid(v); }},
      {"overhead_grid", "pooling grid of the overhead tower, RxC",
       [](const C& c) { return std::to_string(c.overhead_grid_rows) + "x" + std::to_string(c.overhead_grid_cols); },
       [](C& c, S v) { std::tie(c.overhead_grid_rows, c.overhead_grid_cols) = parse_grid(v); }},
      {"widths", "dense layer widths; the last is the embedding size", [](const C& c) { return join(c.widths); },
       [](C& c, S v) { c.widths = parse_list(v); }},
      {"inv_temperature", "initial 1/tau", [](const C& c) { return fmt(c.inv_temperature); },
       [](C& c, S v) { c.inv_temperature = to_double(v); }},
      {"label_smoothing", "epsilon of the smoothed contrastive target", [](const C& c) { return fmt(c.label_smoothing); },
       [](C& c, S v) { c.label_smoothing = to_double(v); }},
      {"symmetric", "average both retrieval directions", [](const C& c) { return std::string(c.symmetric ? "1" : "0"); },
       [](C& c, S v) { c.symmetric = parse_bool(v); }},
      {"aug_flip_prob", "", [](const C& c) { return fmt(c.augment.flip_prob); },
       [](C& c, S v) { c.augment.flip_prob = to_double(v); }},
      {"aug_crop_min", "smallest retained crop area", [](const C& c) { return fmt(c.augment.crop_min); },
       [](C& c, S v) { c.augment.crop_min = to_double(v); }},
      {"aug_crop_max", "", [](const C& c) { return fmt(c.augment.crop_max); },
       [](C& c, S v) { c.augment.crop_max = to_double(v); }},
      {"aug_brightness", "", [](const C& c) { return fmt(c.augment.brightness); },
       [](C& c, S v) { c.augment.brightness = to_double(v); }},
      {"aug_contrast", "", [](const C& c) { return fmt(c.augment.contrast); },
       [](C& c, S v) { c.augment.contrast = to_double(v); }},
      {"aug_saturation", "", [](const C& c) { return fmt(c.augment.saturation); },
       [](C& c, S v) { c.augment.saturation = to_double(v); }},
      {"aug_grayscale_prob", "", [](const C& c) { return fmt(c.augment.grayscale_prob); },
       [](C& c, S v) { c.augment.grayscale_prob = to_double(v); }},
      {"intra_epochs", "cold start: augmented-pair epochs per tower (reference: part of 40)",
       [](const C& c) { return std::to_string(c.intra_epochs); }, [](C& c, S v) { c.intra_epochs = to_int(v); }},
      {"cross_epochs", "cold start: ground-fake epochs (reference: part of 40)",
       [](const C& c) { return std::to_string(c.cross_epochs); }, [](C& c, S v) { c.cross_epochs = to_int(v); }},
      {"semi_epochs", "pseudo-label epochs (reference: 60)", [](const C& c) { return std::to_string(c.semi_epochs); },
       [](C& c, S v) { c.semi_epochs = to_int(v); }},
      {"refresh_every", "epochs between label refreshes", [](const C& c) { return std::to_string(c.refresh_every); },
       [](C& c, S v) { c.refresh_every = to_int(v); }},
      {"tau0", "initial gap threshold", [](const C& c) { return fmt(c.tau0); }, [](C& c, S v) { c.tau0 = to_double(v); }},
      {"tau_min", "threshold floor", [](const C& c) { return fmt(c.tau_min); },
       [](C& c, S v) { c.tau_min = to_double(v); }},
      {"rounds", "curriculum rounds; -1 refreshes at every refresh point, 0 freezes the bootstrap labels",
       [](const C& c) { return std::to_string(c.rounds); }, [](C& c, S v) { c.rounds = to_int(v); }},
      {"one_sided", "filter on the ground-query gap only", [](const C& c) { return std::string(c.one_sided ? "1" : "0"); },
       [](C& c, S v) { c.one_sided = parse_bool(v); }},
      {"gt_ratio", "share of training pairs given as fixed ground truth", [](const C& c) { return fmt(c.gt_ratio); },
       [](C& c, S v) { c.gt_ratio = to_double(v); }},
      {"cross_weight", "lambda of the ground-fake term", [](const C& c) { return fmt(c.cross_weight); },
       [](C& c, S v) { c.cross_weight = to_double(v); }},
      {"batch_size", "", [](const C& c) { return std::to_string(c.batch_size); },
       [](C& c, S v) { c.batch_size = to_u64(v); }},
      {"unlabeled_pad", "unlabeled negatives added per side of a pseudo-label batch",
       [](const C& c) { return std::to_string(c.unlabeled_pad); }, [](C& c, S v) { c.unlabeled_pad = to_u64(v); }},
      {"lr", "AdamW learning rate of the cold start", [](const C& c) { return fmt(c.lr); },
       [](C& c, S v) { c.lr = to_double(v); }},
      {"semi_lr", "AdamW learning rate of the pseudo-label epochs", [](const C& c) { return fmt(c.semi_lr); },
       [](C& c, S v) { c.semi_lr = to_double(v); }},
      {"lr_decay", "decay semi_lr linearly to zero", [](const C& c) { return std::string(c.lr_decay ? "1" : "0"); },
       [](C& c, S v) { c.lr_decay = parse_bool(v); }},
      {"weight_decay", "decoupled decay on weight matrices", [](const C& c) { return fmt(c.weight_decay); },
       [](C& c, S v) { c.weight_decay = to_double(v); }},
      {"seed", "training seed", [](const C& c) { return std::to_string(c.seed); },
       [](C& c, S v) { c.seed = to_u64(v); }},
      {"init_model", "checkpoint to start from instead of a fresh initialization",
       [](const C& c) { return c.init_model; }, [](C& c, S v) { c.init_model = v; }},
      {"eval_ks", "recall cut-offs", [](const C& c) { return join(c.eval_ks); },
       [](C& c, S v) { c.eval_ks = parse_list(v); }},
      {"eval_percent", "R@percent% cut-off", [](const C& c) { return fmt(c.eval_percent); },
       [](C& c, S v) { c.eval_percent = to_double(v); }},
  };
  return keys;
}

}  // namespace detail

inline std::string format_config(const PipelineConfig& c) {
  std::string out;
  for (const auto& k : detail::config_keys()) {
    if (*k.doc) out += std::string("# ") + k.doc + "\n";
    out += std::string(k.name) + " = " + k.get(c) + "\n";
  }
  return out;
}

inline PipelineConfig parse_config(const std::string& text, const std::string& source) {
  PipelineConfig c;
  for (const auto& [key, value] : io::parse_key_values(text, source)) {
    const auto& keys = detail::config_keys();
    const auto it = std::find_if(keys.begin(), keys.end(), [&](const auto& k) { return key == k.name; });
    if (it == keys.end()) throw ConfigError(source + ": unknown key " + key);
    try {
      it->set(c, value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::logic_error&) {
      throw ConfigError(source + ": bad value for " + key + ": " + value);
    }
  }
  c.validate();
  return c;
}

inline PipelineConfig read_config(const std::filesystem::path& path) {
  return parse_config(io::read_text(path), path.string());
}

inline std::uint64_t PipelineConfig::hash() const { return io::fnv1a(format_config(*this)); }

}  // namespace cvgl
