// branchseg/config.hpp -- the single JSON run configuration: schema-checked
// parsing with field-path diagnostics, unknown-key rejection at every level,
// and the fully-resolved echo written next to run outputs.
//
// Copyright 2026 The branchseg Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "branchseg/dataio.hpp"
#include "branchseg/network.hpp"
#include "branchseg/synthdata.hpp"
#include "branchseg/trainer.hpp"

namespace branchseg {

struct ScribbleConfig {
  double coverage = 0.5;
  // Background strokes are sparse by default; the source protocol states the
  // guidewire fraction only.
  double bg_coverage = 0.02;
  uint64_t seed = 0;

  void validate() const {
    if (coverage < 0.0 || coverage > 1.0)
      throw ConfigError("scribble.coverage: must be in [0,1]");
    if (bg_coverage < 0.0 || bg_coverage > 1.0)
      throw ConfigError("scribble.bg_coverage: must be in [0,1]");
  }
};

struct SplitConfig {
  SplitRatios ratios;
  uint64_t seed = 0;

  void validate() const {
    if (ratios.train_val <= 0.0 || ratios.train_val >= 1.0 ||
        ratios.test <= 0.0 || ratios.test >= 1.0)
      throw ConfigError("split.train_val/test: must be in (0,1)");
    if (ratios.val_of_trainval < 0.0 || ratios.val_of_trainval >= 1.0)
      throw ConfigError("split.val_of_trainval: must be in [0,1)");
  }
};

struct AblateConfig {
  std::vector<int> decoder_counts = {1, 2, 3};
  std::vector<double> lambda_grid = {0.5};
  std::vector<double> coverages = {0.25, 0.5, 0.75, 1.0};
  std::vector<uint64_t> seeds = {1, 2, 3};
  std::vector<std::string> methods = {"consistency", "entropy_min",
                                      "total_variation", "mumford_shah"};
  int workers = 0;  // 0 = min(4, hardware threads)
  bool decoder_grid = true;
  bool coverage_sweep = true;
  bool method_comparison = false;

  void validate() const {
    if (workers < 0) throw ConfigError("ablate.workers: must be >= 0");
    if (seeds.empty()) throw ConfigError("ablate.seeds: must be non-empty");
    for (int k : decoder_counts)
      if (k < 1) throw ConfigError("ablate.decoder_counts: entries must be >= 1");
    for (double l : lambda_grid)
      if (l < 0.0 || l > 1.0)
        throw ConfigError("ablate.lambda_grid: entries must be in [0,1]");
    for (double c : coverages)
      if (c <= 0.0 || c > 1.0)
        throw ConfigError("ablate.coverages: entries must be in (0,1]");
    for (const auto& m : methods) regularizer_from_string(m);  // may throw
  }
};

struct EvalConfig {
  std::string split = "test";
  bool per_image_csv = true;

  void validate() const {
    if (split != "train" && split != "val" && split != "test")
      throw ConfigError("eval.split: must be train|val|test");
  }
};

struct PathsConfig {
  std::string dataset;
  std::string out;
  std::string checkpoint;
};

struct RunConfig {
  SynthConfig synth;
  ScribbleConfig scribble;
  ArchConfig arch;
  TrainConfig train;
  SplitConfig split;
  AblateConfig ablate;
  EvalConfig eval;
  PathsConfig paths;

  void validate() const {
    synth.validate();
    scribble.validate();
    arch.validate();
    train.validate();
    split.validate();
    ablate.validate();
    eval.validate();
  }
};

namespace detail {

// Tracks which keys a section consumed so anything left over is rejected
// with its full field path.
class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& j, std::string path)
      : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  std::string field(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  template <typename T>
  void get(const std::string& key, T* v) {
    if (!take(key)) return;
    *v = scalar<T>(j_.at(key), field(key));
  }

  template <typename T>
  void get_list(const std::string& key, std::vector<T>* v) {
    if (!take(key)) return;
    const auto& e = j_.at(key);
    if (!e.is_array()) throw ConfigError(field(key) + ": expected an array");
    std::vector<T> out;
    for (size_t i = 0; i < e.size(); ++i)
      out.push_back(
          scalar<T>(e[i], field(key) + "[" + std::to_string(i) + "]"));
    *v = std::move(out);
  }

  std::optional<nlohmann::json> object(const std::string& key) {
    if (!take(key)) return std::nullopt;
    const auto& e = j_.at(key);
    if (!e.is_object()) throw ConfigError(field(key) + ": expected an object");
    std::optional<nlohmann::json> out;
    out.emplace(e);
    return out;
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!used_.count(item.key()))
        throw ConfigError(field(item.key()) + ": unknown key");
  }

 private:
  template <typename T>
  static T scalar(const nlohmann::json& e, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!e.is_boolean()) throw ConfigError(where + ": expected a boolean");
    } else if constexpr (std::is_same_v<T, int>) {
      if (!e.is_number_integer())
        throw ConfigError(where + ": expected an integer");
    } else if constexpr (std::is_same_v<T, uint64_t>) {
      if (!(e.is_number_unsigned() ||
            (e.is_number_integer() && e.get<int64_t>() >= 0)))
        throw ConfigError(where + ": expected a nonnegative integer");
    } else if constexpr (std::is_same_v<T, double>) {
      if (!e.is_number()) throw ConfigError(where + ": expected a number");
    } else {
      if (!e.is_string()) throw ConfigError(where + ": expected a string");
    }
    return e.get<T>();
  }

  bool take(const std::string& key) {
    if (!j_.contains(key)) return false;
    used_.insert(key);
    return true;
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> used_;
};

}  // namespace detail

inline SynthConfig parse_synth_config(const nlohmann::json& j) {
  detail::ConfigReader r(j, "synth");
  SynthConfig c;
  r.get("image_size", &c.image_size);
  r.get("n_images", &c.n_images);
  r.get("curve_control_points", &c.curve_control_points);
  r.get("curve_thickness_px", &c.curve_thickness_px);
  r.get("n_distractors", &c.n_distractors);
  r.get("noise_sigma", &c.noise_sigma);
  r.get("contrast", &c.contrast);
  r.get("seed", &c.seed);
  r.finish();
  return c;
}

inline ScribbleConfig parse_scribble_config(const nlohmann::json& j) {
  detail::ConfigReader r(j, "scribble");
  ScribbleConfig c;
  r.get("coverage", &c.coverage);
  r.get("bg_coverage", &c.bg_coverage);
  r.get("seed", &c.seed);
  r.finish();
  return c;
}

inline ArchConfig parse_arch_config(const nlohmann::json& j) {
  detail::ConfigReader r(j, "arch");
  ArchConfig c;
  r.get("n_decoders", &c.n_decoders);
  r.get("depth", &c.depth);
  r.get("base_channels", &c.base_channels);
  bool had_rates = j.contains("dilation_rates");
  r.get_list("dilation_rates", &c.dilation_rates);
  if (!had_rates) c.dilation_rates = default_dilation_rates(c.n_decoders);
  r.get("aux_dropout_rate", &c.aux_dropout_rate);
  std::string mode = to_string(c.dropout_mode);
  r.get("dropout_mode", &mode);
  c.dropout_mode = dropout_mode_from_string(mode);
  r.get("n_classes", &c.n_classes);
  r.finish();
  return c;
}

inline AugmentConfig parse_augment_config(const nlohmann::json& j) {
  detail::ConfigReader r(j, "augment");
  AugmentConfig c;
  r.get("enabled", &c.enabled);
  r.get("zoom_range", &c.zoom_range);
  r.get("translation_range", &c.translation_range);
  r.get("shear_max_deg", &c.shear_max_deg);
  r.get("rotation_max_deg", &c.rotation_max_deg);
  r.get("flip_prob", &c.flip_prob);
  r.finish();
  return c;
}

inline TrainConfig parse_train_config(const nlohmann::json& j) {
  detail::ConfigReader r(j, "train");
  TrainConfig c;
  r.get("learning_rate", &c.learning_rate);
  r.get("batch_size", &c.batch_size);
  r.get("epochs", &c.epochs);
  r.get("gamma", &c.gamma);
  r.get("lambda_main", &c.lambda_main);
  r.get("seed", &c.seed);
  r.get("normalize_inputs", &c.normalize_inputs);
  std::string dist = "ce_pl";
  r.get("consistency_distance", &dist);
  c.consistency_distance = consistency_distance_from_string(dist);
  std::string reg = to_string(c.regularizer);
  r.get("regularizer", &reg);
  c.regularizer = regularizer_from_string(reg);
  r.get("gamma_rampup_epochs", &c.gamma_rampup_epochs);
  std::string von =
      c.validate_on == TrainConfig::ValidateOn::kFullMask ? "full_mask"
                                                          : "scribble";
  r.get("validate_on", &von);
  if (von == "full_mask")
    c.validate_on = TrainConfig::ValidateOn::kFullMask;
  else if (von == "scribble")
    c.validate_on = TrainConfig::ValidateOn::kScribble;
  else
    throw ConfigError("train.validate_on: must be full_mask|scribble");
  r.get("adam_beta1", &c.adam_beta1);
  r.get("adam_beta2", &c.adam_beta2);
  r.get("adam_eps", &c.adam_eps);
  r.finish();
  return c;
}

inline SplitConfig parse_split_config(const nlohmann::json& j) {
  detail::ConfigReader r(j, "split");
  SplitConfig c;
  r.get("train_val", &c.ratios.train_val);
  r.get("test", &c.ratios.test);
  r.get("val_of_trainval", &c.ratios.val_of_trainval);
  r.get("seed", &c.seed);
  r.finish();
  return c;
}

inline AblateConfig parse_ablate_config(const nlohmann::json& j) {
  detail::ConfigReader r(j, "ablate");
  AblateConfig c;
  r.get_list("decoder_counts", &c.decoder_counts);
  r.get_list("lambda_grid", &c.lambda_grid);
  r.get_list("coverages", &c.coverages);
  r.get_list("seeds", &c.seeds);
  r.get_list("methods", &c.methods);
  r.get("workers", &c.workers);
  r.get("decoder_grid", &c.decoder_grid);
  r.get("coverage_sweep", &c.coverage_sweep);
  r.get("method_comparison", &c.method_comparison);
  r.finish();
  return c;
}

inline EvalConfig parse_eval_config(const nlohmann::json& j) {
  detail::ConfigReader r(j, "eval");
  EvalConfig c;
  r.get("split", &c.split);
  r.get("per_image_csv", &c.per_image_csv);
  r.finish();
  return c;
}

inline PathsConfig parse_paths_config(const nlohmann::json& j) {
  detail::ConfigReader r(j, "paths");
  PathsConfig c;
  r.get("dataset", &c.dataset);
  r.get("out", &c.out);
  r.get("checkpoint", &c.checkpoint);
  r.finish();
  return c;
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::ConfigReader root(j, "");
  RunConfig c;
  if (auto s = root.object("synth")) c.synth = parse_synth_config(*s);
  if (auto s = root.object("scribble")) c.scribble = parse_scribble_config(*s);
  if (auto s = root.object("arch")) c.arch = parse_arch_config(*s);
  if (auto s = root.object("augment"))
    c.train.augment = parse_augment_config(*s);
  if (auto s = root.object("train")) {
    const AugmentConfig keep = c.train.augment;
    c.train = parse_train_config(*s);
    c.train.augment = keep;
  }
  if (auto s = root.object("split")) c.split = parse_split_config(*s);
  if (auto s = root.object("ablate")) c.ablate = parse_ablate_config(*s);
  if (auto s = root.object("eval")) c.eval = parse_eval_config(*s);
  if (auto s = root.object("paths")) c.paths = parse_paths_config(*s);
  root.finish();
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("missing config file " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  return {
      {"synth",
       {{"image_size", c.synth.image_size},
        {"n_images", c.synth.n_images},
        {"curve_control_points", c.synth.curve_control_points},
        {"curve_thickness_px", c.synth.curve_thickness_px},
        {"n_distractors", c.synth.n_distractors},
        {"noise_sigma", c.synth.noise_sigma},
        {"contrast", c.synth.contrast},
        {"seed", c.synth.seed}}},
      {"scribble",
       {{"coverage", c.scribble.coverage},
        {"bg_coverage", c.scribble.bg_coverage},
        {"seed", c.scribble.seed}}},
      {"arch", arch_to_json(c.arch)},
      {"augment",
       {{"enabled", c.train.augment.enabled},
        {"zoom_range", c.train.augment.zoom_range},
        {"translation_range", c.train.augment.translation_range},
        {"shear_max_deg", c.train.augment.shear_max_deg},
        {"rotation_max_deg", c.train.augment.rotation_max_deg},
        {"flip_prob", c.train.augment.flip_prob}}},
      {"train",
       {{"learning_rate", c.train.learning_rate},
        {"batch_size", c.train.batch_size},
        {"epochs", c.train.epochs},
        {"gamma", c.train.gamma},
        {"lambda_main", c.train.lambda_main},
        {"seed", c.train.seed},
        {"normalize_inputs", c.train.normalize_inputs},
        {"consistency_distance",
         c.train.consistency_distance ==
                 ConsistencyDistance::kCrossEntropyPseudoLabel
             ? "ce_pl"
             : "mse"},
        {"regularizer", to_string(c.train.regularizer)},
        {"gamma_rampup_epochs", c.train.gamma_rampup_epochs},
        {"validate_on",
         c.train.validate_on == TrainConfig::ValidateOn::kFullMask
             ? "full_mask"
             : "scribble"},
        {"adam_beta1", c.train.adam_beta1},
        {"adam_beta2", c.train.adam_beta2},
        {"adam_eps", c.train.adam_eps}}},
      {"split",
       {{"train_val", c.split.ratios.train_val},
        {"test", c.split.ratios.test},
        {"val_of_trainval", c.split.ratios.val_of_trainval},
        {"seed", c.split.seed}}},
      {"ablate",
       {{"decoder_counts", c.ablate.decoder_counts},
        {"lambda_grid", c.ablate.lambda_grid},
        {"coverages", c.ablate.coverages},
        {"seeds", c.ablate.seeds},
        {"methods", c.ablate.methods},
        {"workers", c.ablate.workers},
        {"decoder_grid", c.ablate.decoder_grid},
        {"coverage_sweep", c.ablate.coverage_sweep},
        {"method_comparison", c.ablate.method_comparison}}},
      {"eval", {{"split", c.eval.split}, {"per_image_csv", c.eval.per_image_csv}}},
      {"paths",
       {{"dataset", c.paths.dataset},
        {"out", c.paths.out},
        {"checkpoint", c.paths.checkpoint}}}};
}

// Every run writes its fully-resolved configuration next to its outputs so
// the run can be reproduced from the artifact directory alone.
inline void save_resolved_config(const RunConfig& c, const std::string& dir) {
  std::ofstream f(dir + "/resolved_config.json");
  if (!f) throw DataError("cannot write " + dir + "/resolved_config.json");
  f << run_config_to_json(c).dump(2) << "\n";
}

}  // namespace branchseg
