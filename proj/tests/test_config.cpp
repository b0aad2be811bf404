// Run-configuration schema: field-path diagnostics, unknown-key rejection,
// enum parsing, resolved-config echo stability.
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

#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>

#include "branchseg/config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace branchseg {
namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("branchseg_cfg_" + std::to_string(::getpid()) + "_" +
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

void expect_parse_error(const json& j, const std::string& needle) {
  try {
    parse_run_config(j);
    FAIL() << "expected ConfigError mentioning '" << needle << "'";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos)
        << e.what();
  }
}

TEST(ParseRunConfig, EmptyObjectYieldsDefaults) {
  const RunConfig c = parse_run_config(json::object());
  EXPECT_EQ(c.synth.image_size, 64);
  EXPECT_EQ(c.synth.n_images, 0);
  EXPECT_EQ(c.scribble.coverage, 0.5);
  EXPECT_EQ(c.arch.n_decoders, 3);
  EXPECT_EQ(c.arch.dilation_rates, (std::vector<int>{1, 2, 4}));
  EXPECT_EQ(c.train.learning_rate, 1e-4);
  EXPECT_EQ(c.train.gamma, 0.5);
  EXPECT_EQ(c.train.epochs, 200);
  EXPECT_TRUE(c.train.augment.enabled);
  EXPECT_EQ(c.split.ratios.train_val, 0.8);
  EXPECT_EQ(c.ablate.coverages, (std::vector<double>{0.25, 0.5, 0.75, 1.0}));
  EXPECT_EQ(c.eval.split, "test");
  EXPECT_TRUE(c.paths.dataset.empty());
}

TEST(ParseRunConfig, UnknownKeysRejectedWithFullPath) {
  expect_parse_error({{"synth", {{"foo", 1}}}}, "synth.foo: unknown key");
  expect_parse_error({{"bogus", json::object()}}, "bogus: unknown key");
  // augment is a top-level section, not a train key
  expect_parse_error({{"train", {{"augment", json::object()}}}},
                     "train.augment: unknown key");
  expect_parse_error({{"eval", {{"splits", "test"}}}},
                     "eval.splits: unknown key");
}

TEST(ParseRunConfig, TypeErrorsNameFieldAndExpectation) {
  expect_parse_error({{"synth", {{"image_size", "big"}}}},
                     "synth.image_size: expected an integer");
  expect_parse_error({{"train", {{"learning_rate", "fast"}}}},
                     "train.learning_rate: expected a number");
  expect_parse_error({{"train", {{"normalize_inputs", 1}}}},
                     "train.normalize_inputs: expected a boolean");
  expect_parse_error({{"eval", {{"split", 3}}}},
                     "eval.split: expected a string");
  expect_parse_error({{"ablate", {{"seeds", {-1}}}}},
                     "ablate.seeds[0]: expected a nonnegative integer");
  expect_parse_error({{"ablate", {{"decoder_counts", 3}}}},
                     "ablate.decoder_counts: expected an array");
  expect_parse_error({{"synth", 3}}, "synth: expected an object");
}

TEST(ParseRunConfig, EnumFieldsRejectUnknownNames) {
  expect_parse_error({{"train", {{"validate_on", "both"}}}},
                     "train.validate_on: must be full_mask|scribble");
  expect_parse_error({{"train", {{"regularizer", "tv"}}}}, "regularizer");
  expect_parse_error({{"train", {{"consistency_distance", "l1"}}}},
                     "consistency_distance");
  expect_parse_error({{"arch", {{"dropout_mode", "gauss"}}}}, "dropout_mode");
  expect_parse_error({{"ablate", {{"methods", {"consistency", "magic"}}}}},
                     "regularizer");
}

TEST(ParseRunConfig, SectionValidatorsRunAfterParsing) {
  expect_parse_error({{"synth", {{"image_size", 8}}}},
                     "synth.image_size: must be >= 16");
  expect_parse_error({{"scribble", {{"coverage", 1.5}}}},
                     "scribble.coverage: must be in [0,1]");
  expect_parse_error({{"train", {{"lambda_main", -0.1}}}},
                     "train.lambda_main: must be in [0,1]");
  expect_parse_error({{"ablate", {{"coverages", {0.0}}}}},
                     "ablate.coverages");
  expect_parse_error({{"eval", {{"split", "dev"}}}},
                     "eval.split: must be train|val|test");
}

TEST(ParseRunConfig, ValuesLandInTheRightFields) {
  const json j = {
      {"synth", {{"image_size", 32}, {"n_images", 20}, {"seed", 9}}},
      {"scribble", {{"coverage", 0.25}, {"bg_coverage", 0.75}}},
      {"arch", {{"n_decoders", 2}, {"depth", 3}, {"base_channels", 8}}},
      {"train",
       {{"epochs", 5},
        {"batch_size", 4},
        {"gamma", 0.25},
        {"regularizer", "consistency"},
        {"consistency_distance", "mse"},
        {"validate_on", "scribble"}}},
      {"split", {{"train_val", 0.7}, {"test", 0.3}, {"val_of_trainval", 0.2}}},
      {"ablate", {{"decoder_counts", {1, 2}}, {"method_comparison", true}}},
      {"eval", {{"split", "val"}, {"per_image_csv", false}}},
      {"paths", {{"dataset", "/d"}, {"out", "/o"}, {"checkpoint", "/c"}}}};
  const RunConfig c = parse_run_config(j);
  EXPECT_EQ(c.synth.image_size, 32);
  EXPECT_EQ(c.synth.n_images, 20);
  EXPECT_EQ(c.synth.seed, 9u);
  EXPECT_EQ(c.scribble.coverage, 0.25);
  EXPECT_EQ(c.scribble.bg_coverage, 0.75);
  EXPECT_EQ(c.arch.n_decoders, 2);
  // dilation defaults track the parsed decoder count
  EXPECT_EQ(c.arch.dilation_rates, default_dilation_rates(2));
  EXPECT_EQ(c.train.epochs, 5);
  EXPECT_EQ(c.train.gamma, 0.25);
  EXPECT_EQ(c.train.consistency_distance, ConsistencyDistance::kMsePairwise);
  EXPECT_EQ(c.train.validate_on, TrainConfig::ValidateOn::kScribble);
  EXPECT_EQ(c.split.ratios.train_val, 0.7);
  EXPECT_EQ(c.ablate.decoder_counts, (std::vector<int>{1, 2}));
  EXPECT_TRUE(c.ablate.method_comparison);
  EXPECT_EQ(c.eval.split, "val");
  EXPECT_FALSE(c.eval.per_image_csv);
  EXPECT_EQ(c.paths.dataset, "/d");
}

TEST(ParseRunConfig, ExplicitDilationRatesWin) {
  const json j = {{"arch", {{"n_decoders", 2}, {"dilation_rates", {3, 5}}}}};
  EXPECT_EQ(parse_run_config(j).arch.dilation_rates,
            (std::vector<int>{3, 5}));
}

TEST(ParseRunConfig, TopLevelAugmentSectionFeedsTraining) {
  const json j = {{"augment", {{"enabled", false}, {"flip_prob", 0.25}}},
                  {"train", {{"epochs", 7}}}};
  const RunConfig c = parse_run_config(j);
  EXPECT_FALSE(c.train.augment.enabled);
  EXPECT_EQ(c.train.augment.flip_prob, 0.25);
  EXPECT_EQ(c.train.epochs, 7);
  expect_parse_error({{"augment", {{"flip_prob", 1.5}}}},
                     "augment.flip_prob");
}

TEST(ResolvedEcho, RoundTripsToTheSameJson) {
  RunConfig c;
  c.synth.image_size = 32;
  c.synth.n_images = 12;
  c.arch.n_decoders = 2;
  c.arch.dilation_rates = {1, 3};
  c.arch.dropout_mode = DropoutMode::kElement;
  c.train.consistency_distance = ConsistencyDistance::kMsePairwise;
  c.train.validate_on = TrainConfig::ValidateOn::kScribble;
  c.train.regularizer = Regularizer::kSharedConsistency;
  c.train.gamma_rampup_epochs = 3;
  c.ablate.methods = {"consistency", "entropy_min"};
  c.eval.split = "val";
  c.paths.out = "/tmp/x";

  const json echo = run_config_to_json(c);
  const RunConfig c2 = parse_run_config(echo);
  EXPECT_EQ(run_config_to_json(c2), echo);

  const json defaults = run_config_to_json(RunConfig{});
  EXPECT_EQ(run_config_to_json(parse_run_config(defaults)), defaults);
}

TEST(LoadRunConfig, FileLevelErrors) {
  TempDir dir;
  EXPECT_THROW(load_run_config(dir.str() + "/absent.json"), DataError);

  const std::string bad = dir.str() + "/bad.json";
  std::ofstream(bad) << "{nope";
  try {
    load_run_config(bad);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("not valid JSON"), std::string::npos)
        << e.what();
  }

  const std::string good = dir.str() + "/good.json";
  std::ofstream(good) << run_config_to_json(RunConfig{}).dump(2);
  EXPECT_NO_THROW(load_run_config(good));
}

TEST(SaveResolvedConfig, WritesALoadableEcho) {
  TempDir dir;
  RunConfig c;
  c.synth.n_images = 5;
  c.train.epochs = 2;
  save_resolved_config(c, dir.str());
  const RunConfig back = load_run_config(dir.str() + "/resolved_config.json");
  EXPECT_EQ(run_config_to_json(back), run_config_to_json(c));
}

}  // namespace
}  // namespace branchseg
