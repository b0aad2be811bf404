// branchseg -- command-line entry point: data synthesis, scribbling,
// training, evaluation, ablation, and report generation as reproducible
// seeded pipelines.
//
// Exit codes: 0 success, 2 configuration schema violation (message carries
// the field path), 3 missing or mismatched input data, 1 anything else.
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

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "branchseg/branchseg.hpp"

namespace fs = std::filesystem;
using namespace branchseg;

namespace {

struct Options {
  std::string config_path;
  std::string out_dir;
  std::string data_dir;
  std::string checkpoint_dir;
  uint64_t seed = 0;
  bool seed_set = false;
  double coverage = -1.0;
  double bg_coverage = -1.0;
  std::vector<std::string> report_dirs;
};

RunConfig load_config_or_default(const Options& opt) {
  if (opt.config_path.empty()) return RunConfig{};
  return load_run_config(opt.config_path);
}

std::string require_dir(const std::string& flag_value,
                        const std::string& config_value,
                        const std::string& what) {
  if (!flag_value.empty()) return flag_value;
  if (!config_value.empty()) return config_value;
  throw ConfigError(what + ": required (set it in the config or pass the flag)");
}

std::vector<std::string> make_ids(int n) {
  std::vector<std::string> ids;
  char buf[16];
  for (int i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof buf, "%06d", i);
    ids.emplace_back(buf);
  }
  return ids;
}

int effective_workers(int configured) {
  if (configured > 0) return configured;
  const unsigned hw = std::thread::hardware_concurrency();
  return int(std::min(4u, hw ? hw : 1u));
}

std::vector<Sample> copy_subset(const Dataset& ds,
                                const std::vector<std::string>& ids) {
  std::vector<Sample> out;
  for (const Sample* s : ds.subset(ids)) out.push_back(*s);
  return out;
}

void cmd_synth(const Options& opt) {
  RunConfig cfg = load_config_or_default(opt);
  if (opt.seed_set) cfg.synth.seed = opt.seed;
  const std::string out =
      require_dir(opt.out_dir, cfg.paths.dataset, "paths.dataset");
  const auto pairs = generate_dataset(cfg.synth);
  const auto ids = make_ids(cfg.synth.n_images);
  const auto split = split_dataset(ids, cfg.split.ratios, cfg.split.seed);
  save_dataset(out, pairs, split);
  save_resolved_config(cfg, out);
  std::printf("synth: wrote %d images to %s\n", cfg.synth.n_images,
              out.c_str());
}

void cmd_scribble(const Options& opt) {
  RunConfig cfg = load_config_or_default(opt);
  if (opt.seed_set) cfg.scribble.seed = opt.seed;
  if (opt.coverage >= 0.0) cfg.scribble.coverage = opt.coverage;
  if (opt.bg_coverage >= 0.0) cfg.scribble.bg_coverage = opt.bg_coverage;
  cfg.scribble.validate();
  const std::string data =
      require_dir(opt.data_dir, cfg.paths.dataset, "paths.dataset");
  const Dataset ds = load_dataset(data);
  fs::create_directories(fs::path(data) / "scribbles");
  int n = 0;
  for (const Sample& s : ds.samples) {
    if (!s.full_mask)
      throw DataError("scribble: sample '" + s.id + "' has no full mask");
    const AnnotationMap ann = make_scribbles(
        *s.full_mask, cfg.scribble.coverage, cfg.scribble.bg_coverage,
        scribble_image_seed(cfg.scribble.seed, cfg.scribble.coverage,
                            cfg.scribble.bg_coverage, s.id));
    save_mask_png(fs::path(data) / "scribbles" / (s.id + ".png"), ann);
    ++n;
  }
  std::ofstream echo(fs::path(data) / "resolved_config.scribble.json");
  echo << run_config_to_json(cfg).dump(2) << "\n";
  std::printf("scribble: coverage=%s bg_coverage=%s wrote %d annotations\n",
              format_g17(cfg.scribble.coverage).c_str(),
              format_g17(cfg.scribble.bg_coverage).c_str(), n);
}

void cmd_train(const Options& opt) {
  RunConfig cfg = load_config_or_default(opt);
  if (opt.seed_set) cfg.train.seed = opt.seed;
  const std::string data =
      require_dir(opt.data_dir, cfg.paths.dataset, "paths.dataset");
  const std::string out = require_dir(opt.out_dir, cfg.paths.out, "paths.out");
  const Dataset ds = load_dataset(data);
  const auto train_set = ds.subset(ds.split.train);
  const auto val_set = ds.subset(ds.split.val);

  Model<float> model(cfg.arch);
  model.init_params(cfg.train.seed);
  Trainer<float> trainer(&model, cfg.train);
  fs::create_directories(out);
  const TrainReport rep = trainer.train(train_set, val_set, out);
  save_resolved_config(cfg, out);
  std::printf("train: best val_miou=%s epoch=%d metric=%s out=%s\n",
              format_g17(rep.best_val_miou).c_str(), rep.best_epoch,
              rep.validation_metric.c_str(), out.c_str());
}

void cmd_eval(const Options& opt) {
  RunConfig cfg = load_config_or_default(opt);
  const std::string ckpt =
      require_dir(opt.checkpoint_dir, cfg.paths.checkpoint, "paths.checkpoint");
  const std::string data =
      require_dir(opt.data_dir, cfg.paths.dataset, "paths.dataset");
  CheckpointMeta meta;
  const Model<float> model = load_checkpoint<float>(ckpt, &meta);
  const Dataset ds = load_dataset(data);
  const auto& ids = cfg.eval.split == "train"  ? ds.split.train
                    : cfg.eval.split == "val"  ? ds.split.val
                                               : ds.split.test;
  const auto samples = ds.subset(ids);
  const EvalResult res =
      evaluate(model, samples, cfg.train.normalize_inputs);

  if (!opt.out_dir.empty()) {
    fs::create_directories(opt.out_dir);
    std::ofstream f(fs::path(opt.out_dir) / "eval.csv");
    if (!f) throw DataError("cannot write " + opt.out_dir + "/eval.csv");
    f << "id,iou_background,iou_foreground,miou\n";
    if (cfg.eval.per_image_csv)
      for (const auto& im : res.images)
        f << im.id << ',' << format_g17(im.per_class[0]) << ','
          << format_g17(im.per_class[1]) << ',' << format_g17(im.miou) << "\n";
    f << "all," << "," << "," << format_g17(res.dataset_miou) << "\n";
    save_resolved_config(cfg, opt.out_dir);
  }
  std::printf("eval: split=%s miou=%s images=%d checkpoint_epoch=%d\n",
              cfg.eval.split.c_str(), format_g17(res.dataset_miou).c_str(),
              res.n_images, meta.epoch);
}

void cmd_ablate(const Options& opt) {
  RunConfig cfg = load_config_or_default(opt);
  if (opt.seed_set) cfg.ablate.seeds = {opt.seed};
  const std::string data =
      require_dir(opt.data_dir, cfg.paths.dataset, "paths.dataset");
  const std::string out = require_dir(opt.out_dir, cfg.paths.out, "paths.out");
  const Dataset ds = load_dataset(data);

  AblationSetup setup;
  setup.train = copy_subset(ds, ds.split.train);
  setup.val = copy_subset(ds, ds.split.val);
  setup.test = copy_subset(ds, ds.split.test);
  setup.arch = cfg.arch;
  setup.train_cfg = cfg.train;
  setup.scribble_seed = cfg.scribble.seed;
  const int workers = effective_workers(cfg.ablate.workers);

  AblationGrid decoder_grid, coverage_grid, method_grid;
  ReportInputs inputs;
  if (cfg.ablate.decoder_grid) {
    decoder_grid = run_decoder_ablation(
        setup, cfg.ablate.decoder_counts, cfg.ablate.lambda_grid,
        cfg.ablate.seeds, cfg.scribble.coverage, cfg.scribble.bg_coverage,
        workers);
    inputs.decoder_grid = &decoder_grid;
  }
  if (cfg.ablate.coverage_sweep) {
    // The sweep line passes through the configured scribble point.
    const double bg_at_full =
        cfg.scribble.coverage > 0.0
            ? cfg.scribble.bg_coverage / cfg.scribble.coverage
            : cfg.scribble.bg_coverage;
    coverage_grid =
        run_coverage_sweep(setup, cfg.ablate.coverages, cfg.ablate.seeds,
                           bg_at_full, workers);
    inputs.coverage_grid = &coverage_grid;
  }
  if (cfg.ablate.method_comparison) {
    std::vector<MethodSpec> methods;
    for (const auto& name : cfg.ablate.methods) {
      const Regularizer reg = regularizer_from_string(name);
      methods.push_back(
          {name, reg,
           reg == Regularizer::kSharedConsistency ? cfg.arch.n_decoders : 1});
    }
    method_grid = run_method_comparison(setup, methods,
                                        {cfg.scribble.coverage},
                                        cfg.ablate.seeds,
                                        cfg.scribble.bg_coverage, workers);
    inputs.method_grid = &method_grid;
  }
  const auto files = emit_report(inputs, out);
  save_resolved_config(cfg, out);
  int failed = 0;
  for (const auto* g : {&decoder_grid, &coverage_grid, &method_grid})
    for (const auto& c : g->cells)
      if (c.failed) {
        ++failed;
        std::fprintf(stderr,
                     "branchseg: cell failed (%s K=%d cov=%s seed=%llu): %s\n",
                     c.method.c_str(), c.decoders,
                     format_g17(c.coverage).c_str(),
                     (unsigned long long)c.seed, c.error.c_str());
      }
  std::printf("ablate: wrote %zu files to %s (%d failed cells)\n",
              files.size(), out.c_str(), failed);
}

void cmd_report(const Options& opt) {
  if (opt.out_dir.empty()) throw ConfigError("--out: required for report");
  AblationGrid merged;
  std::vector<EpochRow> curve;
  bool have_curve = false;
  for (const auto& dir : opt.report_dirs) {
    const fs::path abl = fs::path(dir) / "ablation.csv";
    if (fs::exists(abl)) {
      const AblationGrid g = read_ablation_csv(abl.string());
      merged.cells.insert(merged.cells.end(), g.cells.begin(), g.cells.end());
    }
    const fs::path met = fs::path(dir) / "metrics.csv";
    if (!have_curve && fs::exists(met)) {
      curve = read_metrics_csv(met.string());
      have_curve = true;
    }
  }
  if (merged.cells.empty() && !have_curve)
    throw DataError("report: no ablation.csv or metrics.csv found in the "
                    "given run directories");
  ReportInputs inputs;
  if (!merged.cells.empty()) {
    inputs.decoder_grid = &merged;
    inputs.coverage_grid = &merged;
  }
  if (have_curve) inputs.loss_curve = &curve;
  const auto files = emit_report(inputs, opt.out_dir);
  std::printf("report: wrote %zu files to %s\n", files.size(),
              opt.out_dir.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"weakly-supervised curvilinear structure segmentation toolkit"};
  app.require_subcommand(1);
  Options opt;

  auto add_common = [&](CLI::App* c, bool config_required) {
    auto* conf = c->add_option("--config", opt.config_path,
                               "JSON run configuration file");
    if (config_required) conf->required();
    c->add_option("--seed", opt.seed, "seed override for this command")
        ->each([&](const std::string&) { opt.seed_set = true; });
    c->add_option("--out", opt.out_dir, "output directory");
  };

  auto* synth = app.add_subcommand(
      "synth", "generate a synthetic dataset (images, masks, split)");
  add_common(synth, true);

  auto* scribble = app.add_subcommand(
      "scribble", "write scribble annotations into a dataset directory");
  add_common(scribble, false);
  scribble->add_option("--data", opt.data_dir, "dataset directory");
  scribble->add_option("--coverage", opt.coverage,
                       "fraction of foreground pixels to annotate");
  scribble->add_option("--bg-coverage", opt.bg_coverage,
                       "fraction of background pixels to annotate");

  auto* train = app.add_subcommand("train", "train a model on scribbles");
  add_common(train, true);
  train->add_option("--data", opt.data_dir, "dataset directory");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, false);
  eval->add_option("--checkpoint", opt.checkpoint_dir,
                   "checkpoint directory (checkpoint.bin + checkpoint.json)");
  eval->add_option("--data", opt.data_dir, "dataset directory");

  auto* ablate = app.add_subcommand(
      "ablate", "run the decoder/coverage/method ablation grids");
  add_common(ablate, true);
  ablate->add_option("--data", opt.data_dir, "dataset directory");

  auto* report = app.add_subcommand(
      "report", "merge run artifacts into CSV tables and plots");
  report->add_option("--out", opt.out_dir, "output directory");
  report->add_option("dirs", opt.report_dirs, "run directories to merge");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) cmd_synth(opt);
    if (*scribble) cmd_scribble(opt);
    if (*train) cmd_train(opt);
    if (*eval) cmd_eval(opt);
    if (*ablate) cmd_ablate(opt);
    if (*report) cmd_report(opt);
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "branchseg: config error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "branchseg: data error: %s\n", e.what());
    return 3;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "branchseg: data error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "branchseg: error: %s\n", e.what());
    return 1;
  }
}
