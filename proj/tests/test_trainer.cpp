// Training-loop contracts: config validation, Adam bookkeeping, determinism,
// stream isolation, checkpoint/metrics round-trips, optimization progress.
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

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "branchseg/synthdata.hpp"
#include "branchseg/trainer.hpp"

namespace fs = std::filesystem;

namespace branchseg {
namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("branchseg_trainer_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  std::string str() const { return path_.string(); }

 private:
  fs::path path_;
};

// Tiny seeded scribble dataset; coverage 1.0 labels every pixel.
std::vector<Sample> toy_samples(int n, double coverage, uint64_t seed,
                                double noise = 0.05) {
  SynthConfig sc;
  sc.image_size = 16;
  sc.n_images = n;
  sc.noise_sigma = noise;
  sc.seed = seed;
  const auto pairs = generate_dataset(sc);
  std::vector<Sample> out;
  for (size_t i = 0; i < pairs.size(); ++i) {
    Sample s;
    s.image = pairs[i].first;
    s.full_mask = pairs[i].second;
    s.annotation = make_scribbles(pairs[i].second, coverage, coverage,
                                  splitmix64(seed + i));
    s.id = "toy" + std::to_string(i);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<const Sample*> ptrs(const std::vector<Sample>& v) {
  std::vector<const Sample*> p;
  for (const auto& s : v) p.push_back(&s);
  return p;
}

Model<float> make_model(int K, uint64_t seed) {
  ArchConfig a;
  a.n_decoders = K;
  a.depth = 2;
  a.base_channels = 4;
  a.dilation_rates = default_dilation_rates(K);
  Model<float> m(a);
  m.init_params(seed);
  return m;
}

TrainConfig quiet_config(uint64_t seed) {
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 4;
  cfg.epochs = 1;
  cfg.seed = seed;
  cfg.augment.enabled = false;
  return cfg;
}

void expect_config_error(const TrainConfig& cfg, const std::string& needle) {
  try {
    cfg.validate();
    FAIL() << "expected ConfigError mentioning " << needle;
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos)
        << e.what();
  }
}

TEST(TrainConfigValidate, NamesTheOffendingField) {
  TrainConfig cfg;
  ASSERT_NO_THROW(cfg.validate());

  cfg = TrainConfig{};
  cfg.learning_rate = 0.0;
  expect_config_error(cfg, "train.learning_rate");

  cfg = TrainConfig{};
  cfg.batch_size = 0;
  expect_config_error(cfg, "train.batch_size");

  cfg = TrainConfig{};
  cfg.epochs = -1;
  expect_config_error(cfg, "train.epochs");

  cfg = TrainConfig{};
  cfg.gamma = -0.5;
  expect_config_error(cfg, "train.gamma");

  cfg = TrainConfig{};
  cfg.lambda_main = 1.5;
  expect_config_error(cfg, "train.lambda_main");

  cfg = TrainConfig{};
  cfg.gamma_rampup_epochs = -1;
  expect_config_error(cfg, "train.gamma_rampup_epochs");

  cfg = TrainConfig{};
  cfg.adam_beta1 = 1.0;
  expect_config_error(cfg, "train.adam_beta");

  cfg = TrainConfig{};
  cfg.adam_eps = 0.0;
  expect_config_error(cfg, "train.adam_eps");

  cfg = TrainConfig{};
  cfg.augment.zoom_range = 1.0;
  expect_config_error(cfg, "augment.zoom_range");
}

TEST(MetricsCsv, RoundTripIsExact) {
  TempDir dir;
  RandomStream rng(1);
  std::vector<EpochRow> rows;
  for (int e = 1; e <= 20; ++e) {
    EpochRow r;
    r.epoch = e;
    r.l_sup = rng.uniform() * std::pow(10.0, rng.uniform(-8.0, 2.0));
    r.l_cons = rng.uniform();
    r.l_total = r.l_sup + 0.5 * r.l_cons;
    r.val_miou = rng.uniform();
    r.seconds = rng.uniform() * 100.0;
    rows.push_back(r);
  }
  const std::string path = dir.str() + "/metrics.csv";
  write_metrics_csv(path, rows);
  const auto got = read_metrics_csv(path);
  ASSERT_EQ(got.size(), rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(got[i].epoch, rows[i].epoch);
    EXPECT_EQ(got[i].l_sup, rows[i].l_sup);
    EXPECT_EQ(got[i].l_cons, rows[i].l_cons);
    EXPECT_EQ(got[i].l_total, rows[i].l_total);
    EXPECT_EQ(got[i].val_miou, rows[i].val_miou);
    EXPECT_EQ(got[i].seconds, rows[i].seconds);
  }
}

TEST(MetricsCsv, RejectsBadFiles) {
  TempDir dir;
  EXPECT_THROW(read_metrics_csv(dir.str() + "/absent.csv"), DataError);

  const std::string bad_header = dir.str() + "/h.csv";
  std::ofstream(bad_header) << "epoch,loss\n1,2\n";
  EXPECT_THROW(read_metrics_csv(bad_header), DataError);

  const std::string short_row = dir.str() + "/s.csv";
  std::ofstream(short_row) << kMetricsHeader << "\n1,2,3\n";
  EXPECT_THROW(read_metrics_csv(short_row), DataError);
}

TEST(TrainerCtor, BaselineRegularizersRequireSingleDecoder) {
  auto m3 = make_model(3, 1), m1 = make_model(1, 1);
  TrainConfig cfg = quiet_config(1);
  cfg.regularizer = Regularizer::kEntropyMin;
  EXPECT_THROW((Trainer<float>(&m3, cfg)), ConfigError);
  EXPECT_NO_THROW((Trainer<float>(&m1, cfg)));
  cfg.regularizer = Regularizer::kSharedConsistency;
  EXPECT_NO_THROW((Trainer<float>(&m3, cfg)));
}

TEST(TrainerStep, ZeroLearningRateIsAFixedPoint) {
  auto model = make_model(2, 5);
  const auto samples = toy_samples(4, 0.5, 7);
  Trainer<float> tr(&model, quiet_config(3));
  tr.lr_schedule = [](int, double) { return 0.0; };
  const auto before = model.params();
  const auto lb = tr.step(ptrs(samples));
  EXPECT_TRUE(std::isfinite(lb.l_total));
  EXPECT_GT(lb.l_total, 0.0);
  EXPECT_TRUE(model.params() == before);
}

TEST(TrainerStep, FirstStepPopulatesAdamMoments) {
  auto model = make_model(2, 6);
  const auto samples = toy_samples(4, 0.5, 8);
  Trainer<float> tr(&model, quiet_config(4));
  ASSERT_EQ(tr.adam_t(), 0);
  tr.step(ptrs(samples));
  EXPECT_EQ(tr.adam_t(), 1);
  size_t nonzero = 0;
  for (size_t i = 0; i < model.n_params(); ++i) {
    const bool g = tr.last_grad()[i] != 0.0f;
    const bool m = tr.adam_m()[i] != 0.0;
    ASSERT_EQ(g, m) << "param " << i;
    nonzero += m;
  }
  EXPECT_GT(nonzero, model.n_params() / 2);
}

TEST(TrainerStep, LossDecompositionIdentity) {
  auto model = make_model(3, 7);
  const auto samples = toy_samples(6, 0.5, 9);
  TrainConfig cfg = quiet_config(5);
  cfg.gamma = 0.7;
  Trainer<float> tr(&model, cfg);
  for (int s = 0; s < 5; ++s) {
    const auto lb = tr.step(ptrs(samples));
    ASSERT_EQ(lb.gamma, 0.7);
    ASSERT_EQ(lb.l_total, lb.l_sup + lb.gamma * lb.l_cons);
    ASSERT_GT(lb.l_cons, 0.0);
  }
}

// Descent oracle: with dropout off and a two-decoder model the step is a
// deterministic function of the parameters, and one Adam step at 1e-4 should
// not increase the loss in at least 16 of 20 seeded trials.
TEST(TrainerStep, DescentDirectionInMostTrials) {
  const auto samples = toy_samples(4, 0.5, 10);
  int descended = 0;
  for (uint64_t trial = 0; trial < 20; ++trial) {
    ArchConfig a;
    a.n_decoders = 2;
    a.depth = 2;
    a.base_channels = 4;
    a.dilation_rates = default_dilation_rates(2);
    a.aux_dropout_rate = 0.0;
    Model<float> model(a);
    model.init_params(100 + trial);
    TrainConfig cfg = quiet_config(trial);
    cfg.learning_rate = 1e-4;
    Trainer<float> tr(&model, cfg);
    const double before = tr.step(ptrs(samples)).l_total;
    const double after = tr.step(ptrs(samples)).l_total;
    descended += (after <= before);
  }
  EXPECT_GE(descended, 16);
}

TEST(TrainerStep, NonFiniteLossAbortsWithDiagnostic) {
  auto model = make_model(2, 8);
  const auto samples = toy_samples(4, 0.5, 11);
  Trainer<float> tr(&model, quiet_config(6));
  model.params()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    tr.step(ptrs(samples));
    FAIL() << "expected divergence abort";
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("training diverged"), std::string::npos) << msg;
    EXPECT_NE(msg.find("epoch"), std::string::npos) << msg;
    EXPECT_NE(msg.find("l_sup"), std::string::npos) << msg;
  }
}

// The lambda stream must not shift when the augmentation stream is consumed
// at a different rate.
TEST(TrainerStep, LambdaStreamIsolatedFromAugmentation) {
  auto model_a = make_model(3, 9), model_b = make_model(3, 9);
  const auto samples = toy_samples(4, 0.5, 12);
  TrainConfig cfg_on = quiet_config(7);
  cfg_on.augment.enabled = true;
  TrainConfig cfg_off = quiet_config(7);
  Trainer<float> a(&model_a, cfg_on), b(&model_b, cfg_off);
  for (int s = 0; s < 6; ++s) {
    a.step(ptrs(samples));
    b.step(ptrs(samples));
    const auto &ma = a.last_mixes(), &mb = b.last_mixes();
    ASSERT_EQ(ma.size(), mb.size());
    for (size_t i = 0; i < ma.size(); ++i) {
      ASSERT_EQ(ma[i].d1, mb[i].d1);
      ASSERT_EQ(ma[i].d2, mb[i].d2);
      ASSERT_EQ(ma[i].lambda, mb[i].lambda);
    }
  }
}

TEST(TrainerTrain, ZeroEpochsIsVacuous) {
  auto model = make_model(2, 10);
  const auto before = model.params();
  const auto samples = toy_samples(4, 0.5, 13);
  TrainConfig cfg = quiet_config(8);
  cfg.epochs = 0;
  Trainer<float> tr(&model, cfg);
  const auto rep = tr.train(ptrs(samples), ptrs(samples));
  EXPECT_TRUE(rep.rows.empty());
  EXPECT_EQ(rep.best_epoch, 0);
  EXPECT_TRUE(model.params() == before);
}

TEST(TrainerTrain, EmptyTrainingSetIsDataError) {
  auto model = make_model(2, 11);
  const auto val = toy_samples(2, 0.5, 14);
  Trainer<float> tr(&model, quiet_config(9));
  EXPECT_THROW(tr.train({}, ptrs(val)), DataError);
}

TEST(TrainerTrain, SameSeedSameMetricsBitForBit) {
  const auto train_set = toy_samples(10, 0.5, 15);
  const auto val_set = toy_samples(3, 0.5, 16);
  TrainConfig cfg = quiet_config(10);
  cfg.augment.enabled = true;  // exercise every stream
  cfg.epochs = 3;

  std::vector<EpochRow> runs[2];
  for (int r = 0; r < 2; ++r) {
    auto model = make_model(3, 12);
    Trainer<float> tr(&model, cfg);
    runs[r] = tr.train(ptrs(train_set), ptrs(val_set)).rows;
  }
  ASSERT_EQ(runs[0].size(), 3u);
  for (size_t i = 0; i < runs[0].size(); ++i) {
    ASSERT_EQ(runs[0][i].epoch, runs[1][i].epoch);
    ASSERT_EQ(runs[0][i].l_sup, runs[1][i].l_sup);
    ASSERT_EQ(runs[0][i].l_cons, runs[1][i].l_cons);
    ASSERT_EQ(runs[0][i].l_total, runs[1][i].l_total);
    ASSERT_EQ(runs[0][i].val_miou, runs[1][i].val_miou);
    // seconds is wall time and legitimately differs
  }
}

TEST(TrainerTrain, BestCheckpointRoundTrip) {
  TempDir dir;
  const auto train_set = toy_samples(8, 0.5, 17);
  const auto val_set = toy_samples(3, 0.5, 18);
  TrainConfig cfg = quiet_config(11);
  cfg.epochs = 3;

  auto model = make_model(2, 13);
  Trainer<float> tr(&model, cfg);
  const auto rep = tr.train(ptrs(train_set), ptrs(val_set), dir.str());
  ASSERT_EQ(rep.rows.size(), 3u);
  EXPECT_EQ(rep.validation_metric, "miou_full_mask");

  double best = -1.0;
  int best_epoch = 0;
  for (const auto& r : rep.rows)
    if (r.val_miou > best) {
      best = r.val_miou;
      best_epoch = r.epoch;
    }
  EXPECT_EQ(rep.best_val_miou, best);
  EXPECT_EQ(rep.best_epoch, best_epoch);

  // The model was restored to the best epoch's weights.
  EXPECT_EQ(tr.validate(ptrs(val_set), nullptr), rep.best_val_miou);

  // Reloading the checkpoint reproduces the validation score.
  CheckpointMeta meta;
  auto loaded = load_checkpoint<float>(dir.str(), &meta);
  EXPECT_EQ(meta.epoch, rep.best_epoch);
  EXPECT_EQ(meta.val_miou, rep.best_val_miou);
  EXPECT_EQ(meta.seed, cfg.seed);
  Trainer<float> reload_tr(&loaded, cfg);
  EXPECT_NEAR(reload_tr.validate(ptrs(val_set), nullptr), rep.best_val_miou,
              1e-6);

  const auto rows = read_metrics_csv(dir.str() + "/metrics.csv");
  ASSERT_EQ(rows.size(), rep.rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].val_miou, rep.rows[i].val_miou);
    EXPECT_EQ(rows[i].l_total, rep.rows[i].l_total);
  }
}

// Optimization-progress oracle: a one-decoder model with full labels on a
// noiseless set must reduce the supervised loss over 30 epochs.
TEST(TrainerTrain, SupervisedLossFallsOnNoiselessToySet) {
  const auto train_set = toy_samples(10, 1.0, 19, /*noise=*/0.0);
  auto model = make_model(1, 14);
  TrainConfig cfg = quiet_config(12);
  cfg.epochs = 30;
  cfg.batch_size = 16;
  cfg.gamma = 0.0;
  cfg.lambda_main = 1.0;
  Trainer<float> tr(&model, cfg);
  const auto rep = tr.train(ptrs(train_set), {});
  ASSERT_EQ(rep.rows.size(), 30u);
  EXPECT_LT(rep.rows.back().l_sup, rep.rows.front().l_sup);
  for (const auto& r : rep.rows) EXPECT_EQ(r.l_cons, 0.0);
}

TEST(TrainerTrain, GammaRampupScalesReportedTotal) {
  const auto train_set = toy_samples(4, 0.5, 20);
  auto model = make_model(2, 15);
  TrainConfig cfg = quiet_config(13);
  cfg.epochs = 4;
  cfg.gamma = 1.0;
  cfg.gamma_rampup_epochs = 4;
  Trainer<float> tr(&model, cfg);
  const auto rep = tr.train(ptrs(train_set), {});
  ASSERT_EQ(rep.rows.size(), 4u);
  for (const auto& r : rep.rows) {
    const double ge = 1.0 * std::min(1.0, double(r.epoch) / 4.0);
    ASSERT_GT(r.l_cons, 0.0);
    ASSERT_EQ(r.l_total, r.l_sup + ge * r.l_cons);
  }
}

TEST(TrainerValidate, MetricSelectionAndEdgeCases) {
  auto model = make_model(1, 16);
  auto with_masks = toy_samples(2, 0.5, 21);
  TrainConfig cfg = quiet_config(14);
  Trainer<float> tr(&model, cfg);

  std::string metric;
  tr.validate(ptrs(with_masks), &metric);
  EXPECT_EQ(metric, "miou_full_mask");

  auto no_masks = with_masks;
  for (auto& s : no_masks) s.full_mask.reset();
  tr.validate(ptrs(no_masks), &metric);
  EXPECT_EQ(metric, "labeled_accuracy");

  TrainConfig scr = cfg;
  scr.validate_on = TrainConfig::ValidateOn::kScribble;
  Trainer<float> tr2(&model, scr);
  tr2.validate(ptrs(with_masks), &metric);
  EXPECT_EQ(metric, "labeled_accuracy");

  EXPECT_EQ(tr.validate({}, nullptr), 0.0);

  // A val sample with no labeled pixels counts as perfectly predicted under
  // the accuracy fallback.
  Sample blank = no_masks[0];
  blank.annotation = AnnotationMap(16, 16, kUnlabeled);
  const std::vector<const Sample*> one = {&blank};
  EXPECT_EQ(tr.validate(one, nullptr), 1.0);
}

}  // namespace
}  // namespace branchseg
