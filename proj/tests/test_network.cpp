// Encoder/decoder model contracts: shapes, initialization statistics,
// dropout plan mechanics, parameter gradients, checkpoint round-trips.
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
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "branchseg/network.hpp"

namespace fs = std::filesystem;

namespace branchseg {
namespace {

ArchConfig tiny_arch(int K = 2) {
  ArchConfig a;
  a.n_decoders = K;
  a.depth = 2;
  a.base_channels = 2;
  a.dilation_rates = default_dilation_rates(K);
  a.aux_dropout_rate = 0.5;
  a.n_classes = 2;
  return a;
}

Image random_image(int H, int W, uint64_t seed) {
  RandomStream rng(seed, "image");
  Image img(H, W);
  for (size_t i = 0; i < img.size(); ++i) img[i] = float(rng.uniform());
  return img;
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("branchseg_net_" + std::to_string(::getpid()) + "_" +
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

void expect_config_error(ArchConfig a, const std::string& needle) {
  try {
    a.validate();
    FAIL() << "expected ConfigError mentioning " << needle;
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos)
        << e.what();
  }
}

TEST(NetworkArch, ValidateNamesTheOffendingField) {
  ArchConfig a = tiny_arch();
  ASSERT_NO_THROW(a.validate());

  a = tiny_arch();
  a.n_decoders = 0;
  expect_config_error(a, "arch.n_decoders");

  a = tiny_arch();
  a.depth = 9;
  expect_config_error(a, "arch.depth");

  a = tiny_arch();
  a.base_channels = 0;
  expect_config_error(a, "arch.base_channels");

  a = tiny_arch();
  a.dilation_rates = {1};
  expect_config_error(a, "arch.dilation_rates");

  a = tiny_arch();
  a.dilation_rates = {1, 0};
  expect_config_error(a, "arch.dilation_rates");

  a = tiny_arch();
  a.aux_dropout_rate = 1.0;
  expect_config_error(a, "arch.aux_dropout_rate");

  a = tiny_arch();
  a.n_classes = 1;
  expect_config_error(a, "arch.n_classes");
}

TEST(NetworkArch, DefaultDilationRatesDoubleAndSaturate) {
  EXPECT_EQ(default_dilation_rates(1), (std::vector<int>{1}));
  EXPECT_EQ(default_dilation_rates(3), (std::vector<int>{1, 2, 4}));
  EXPECT_EQ(default_dilation_rates(6), (std::vector<int>{1, 2, 4, 8, 8, 8}));
}

TEST(NetworkArch, JsonRoundTrip) {
  ArchConfig a = tiny_arch(3);
  a.dropout_mode = DropoutMode::kElement;
  a.aux_dropout_rate = 0.25;
  const ArchConfig b = arch_from_json(arch_to_json(a));
  EXPECT_EQ(b.n_decoders, a.n_decoders);
  EXPECT_EQ(b.depth, a.depth);
  EXPECT_EQ(b.base_channels, a.base_channels);
  EXPECT_EQ(b.dilation_rates, a.dilation_rates);
  EXPECT_EQ(b.aux_dropout_rate, a.aux_dropout_rate);
  EXPECT_EQ(b.dropout_mode, a.dropout_mode);
  EXPECT_EQ(b.n_classes, a.n_classes);
  EXPECT_THROW(dropout_mode_from_string("gaussian"), ConfigError);
}

TEST(NetworkInit, BlocksTileTheParameterVector) {
  Model<float> m(tiny_arch(3));
  size_t expect_offset = 0;
  for (const auto& blk : m.blocks()) {
    EXPECT_EQ(blk.offset, expect_offset) << blk.name;
    expect_offset += blk.count;
  }
  EXPECT_EQ(expect_offset, m.n_params());
  EXPECT_EQ(m.params().size(), m.n_params());
}

TEST(NetworkInit, GlorotStatisticsAndZeroBiases) {
  ArchConfig a;
  a.n_decoders = 2;
  a.depth = 3;
  a.base_channels = 16;
  a.dilation_rates = default_dilation_rates(2);
  Model<float> m(a);
  m.init_params(7);
  for (const auto& blk : m.blocks()) {
    if (!blk.is_weight) {
      for (size_t i = 0; i < blk.count; ++i)
        ASSERT_EQ(m.params()[blk.offset + i], 0.0f) << blk.name;
      continue;
    }
    if (blk.count < 1000) continue;
    const double want_sd = std::sqrt(2.0 / (blk.fan_in + blk.fan_out));
    double mean = 0.0, var = 0.0;
    for (size_t i = 0; i < blk.count; ++i) mean += m.params()[blk.offset + i];
    mean /= double(blk.count);
    for (size_t i = 0; i < blk.count; ++i) {
      const double d = m.params()[blk.offset + i] - mean;
      var += d * d;
    }
    var /= double(blk.count);
    EXPECT_NEAR(std::sqrt(var), want_sd, 0.2 * want_sd) << blk.name;
    EXPECT_LT(std::abs(mean), 0.2 * want_sd) << blk.name;
  }
}

TEST(NetworkInit, SeededAndDeterministic) {
  Model<float> a(tiny_arch()), b(tiny_arch()), c(tiny_arch());
  a.init_params(11);
  b.init_params(11);
  c.init_params(12);
  EXPECT_TRUE(a.params() == b.params());
  EXPECT_FALSE(a.params() == c.params());
}

TEST(NetworkForward, SoftmaxMapsAreDistributions) {
  Model<float> m(tiny_arch(3));
  m.init_params(3);
  const Image img = random_image(16, 16, 1);
  RandomStream rng(5, "dropout");
  const auto probs = m.forward(img, Mode::kTrain, &rng);
  ASSERT_EQ(probs.size(), 3u);
  for (const auto& p : probs) {
    ASSERT_EQ(p.channels(), 2);
    ASSERT_EQ(p.height(), 16);
    ASSERT_EQ(p.width(), 16);
    const size_t n = p.plane();
    for (size_t i = 0; i < n; ++i) {
      ASSERT_GE(p[i], 0.0);
      ASSERT_GE(p[n + i], 0.0);
      ASSERT_NEAR(p[i] + p[n + i], 1.0, 1e-12);
    }
  }
}

TEST(NetworkForward, SegmentIsMainDecoderArgmax) {
  Model<float> m(tiny_arch(2));
  m.init_params(9);
  const Image img = random_image(16, 16, 2);
  const FullMask mask = m.segment(img);
  const auto probs = m.forward(img, Mode::kEval, nullptr);
  const size_t n = probs[0].plane();
  for (size_t i = 0; i < n; ++i) {
    const uint8_t want =
        probs[0][n + i] > probs[0][i] ? kForeground : kBackground;
    ASSERT_EQ(mask[i], want);
  }
}

TEST(NetworkForward, MainDecoderNeverSeesDropout) {
  Model<float> m(tiny_arch(2));
  m.init_params(21);
  const Image img = random_image(16, 16, 3);
  RandomStream rng(4, "dropout");
  // Redraw until the plan actually drops something, so the auxiliary branch
  // is guaranteed to be perturbed.
  DropoutPlan<float> plan;
  bool any_zero = false;
  for (int draw = 0; draw < 64 && !any_zero; ++draw) {
    plan = m.draw_dropout_plan(16, 16, &rng);
    for (const auto& mask : plan.masks)
      for (float v : mask) any_zero |= (v == 0.0f);
  }
  ASSERT_TRUE(any_zero);
  const auto train = m.forward_logits(img, Mode::kTrain, &plan, nullptr);
  const auto eval = m.forward_logits(img, Mode::kEval, nullptr, nullptr);
  ASSERT_TRUE(train[0] == eval[0]);
  EXPECT_FALSE(train[1] == eval[1]);
  // Eval mode ignores a supplied plan entirely.
  const auto eval2 = m.forward_logits(img, Mode::kEval, &plan, nullptr);
  EXPECT_TRUE(eval2[1] == eval[1]);
}

TEST(NetworkForward, DropoutPlanLayoutAndValues) {
  const ArchConfig a = tiny_arch(3);  // K=3, depth=2, channel mode
  Model<float> m(a);
  RandomStream rng(6, "dropout");
  const auto plan = m.draw_dropout_plan(16, 16, &rng);
  ASSERT_EQ(plan.masks.size(), size_t(2 * 2));  // (K-1) aux x depth stages
  // Site order: d=1 s=1, d=1 s=0, d=2 s=1, d=2 s=0; channel mode mask length
  // equals the stage channel count.
  EXPECT_EQ(plan.masks[0].size(), size_t(a.stage_channels(1)));
  EXPECT_EQ(plan.masks[1].size(), size_t(a.stage_channels(0)));
  EXPECT_EQ(plan.masks[2].size(), size_t(a.stage_channels(1)));
  EXPECT_EQ(plan.masks[3].size(), size_t(a.stage_channels(0)));
  for (const auto& mask : plan.masks)
    for (float v : mask) ASSERT_TRUE(v == 0.0f || v == 2.0f);  // keep = 1/(1-.5)

  ArchConfig e = a;
  e.dropout_mode = DropoutMode::kElement;
  Model<float> me(e);
  const auto eplan = me.draw_dropout_plan(16, 16, &rng);
  EXPECT_EQ(eplan.masks[0].size(), size_t(e.stage_channels(1) * 8 * 8));
  EXPECT_EQ(eplan.masks[1].size(), size_t(e.stage_channels(0) * 16 * 16));

  ArchConfig z = a;
  z.aux_dropout_rate = 0.0;
  Model<float> mz(z);
  const auto zplan = mz.draw_dropout_plan(16, 16, &rng);
  for (const auto& mask : zplan.masks)
    for (float v : mask) ASSERT_EQ(v, 1.0f);
}

TEST(NetworkForward, RejectsIndivisibleInput) {
  ArchConfig a = tiny_arch(1);
  a.depth = 3;
  Model<float> m(a);
  m.init_params(1);
  EXPECT_THROW(m.forward_logits(random_image(12, 16, 4), Mode::kEval, nullptr,
                                nullptr),
               ShapeError);
  EXPECT_NO_THROW(m.forward_logits(random_image(16, 16, 4), Mode::kEval,
                                   nullptr, nullptr));
}

TEST(NetworkForward, OnlyDecoderComputesJustThatBranch) {
  Model<float> m(tiny_arch(3));
  m.init_params(13);
  const Image img = random_image(16, 16, 5);
  const auto all = m.forward_logits(img, Mode::kEval, nullptr, nullptr);
  const auto one = m.forward_logits(img, Mode::kEval, nullptr, nullptr, 1);
  ASSERT_EQ(one.size(), 3u);
  EXPECT_EQ(one[0].size(), 0u);
  EXPECT_EQ(one[2].size(), 0u);
  EXPECT_TRUE(one[1] == all[1]);
}

// Analytic parameter gradients against central finite differences through a
// fixed linear functional of the logits. Train mode with a frozen dropout
// plan, so the whole map params -> L is deterministic and piecewise smooth;
// an instance landing on a ReLU/pool kink is redrawn.
TEST(NetworkGrad, BackwardMatchesFiniteDifferences) {
  const int H = 8, W = 8;
  bool passed = false;
  for (uint64_t attempt = 0; attempt < 3 && !passed; ++attempt) {
    Model<double> m(tiny_arch(2));
    m.init_params(31 + attempt);
    const Image img = random_image(H, W, 100 + attempt);
    RandomStream drop_rng(17 + attempt, "dropout");
    const auto plan = m.draw_dropout_plan(H, W, &drop_rng);

    Tape<double> tape;
    const auto logits = m.forward_logits(img, Mode::kTrain, &plan, &tape);
    RandomStream grng(23, "grad");
    std::vector<Tensor3<double>> G;
    for (const auto& z : logits) {
      Tensor3<double> g(z.channels(), z.height(), z.width());
      for (size_t i = 0; i < g.size(); ++i) g[i] = grng.uniform(-1.0, 1.0);
      G.push_back(std::move(g));
    }
    std::vector<double> dparams(m.n_params(), 0.0);
    m.backward(tape, G, &dparams);

    auto value = [&] {
      const auto z = m.forward_logits(img, Mode::kTrain, &plan, nullptr);
      double L = 0.0;
      for (size_t d = 0; d < z.size(); ++d)
        for (size_t i = 0; i < z[d].size(); ++i) L += G[d][i] * z[d][i];
      return L;
    };

    RandomStream pick(41, "pick");
    double worst = 0.0;
    const double h = 1e-6;
    for (int probe = 0; probe < 40; ++probe) {
      const size_t i = pick.uniform_int(m.n_params());
      const double keep = m.params()[i];
      m.params()[i] = keep + h;
      const double up = value();
      m.params()[i] = keep - h;
      const double dn = value();
      m.params()[i] = keep;
      const double fd = (up - dn) / (2.0 * h);
      const double denom =
          std::max({std::abs(fd), std::abs(dparams[i]), 1e-8});
      worst = std::max(worst, std::abs(fd - dparams[i]) / denom);
    }
    passed = worst < 1e-4;
    if (!passed && attempt == 2)
      FAIL() << "worst relative gradient error " << worst
             << " after 3 instances";
  }
  EXPECT_TRUE(passed);
}

TEST(NetworkGrad, BackwardAccumulates) {
  Model<double> m(tiny_arch(1));
  m.init_params(2);
  const Image img = random_image(8, 8, 6);
  Tape<double> tape;
  const auto logits = m.forward_logits(img, Mode::kEval, nullptr, &tape);
  std::vector<Tensor3<double>> G;
  for (const auto& z : logits) {
    Tensor3<double> g(z.channels(), z.height(), z.width(), 0.5);
    G.push_back(std::move(g));
  }
  std::vector<double> once(m.n_params(), 0.0), twice(m.n_params(), 0.0);
  m.backward(tape, G, &once);
  m.backward(tape, G, &twice);
  m.backward(tape, G, &twice);
  for (size_t i = 0; i < once.size(); ++i)
    ASSERT_NEAR(twice[i], 2.0 * once[i], 1e-12);
}

TEST(Checkpoint, RoundTripIsExact) {
  TempDir dir;
  Model<float> m(tiny_arch(3));
  m.init_params(77);
  const CheckpointMeta meta{123456789ULL, 17, 0.8125};
  save_checkpoint(m, dir.str(), meta);
  ASSERT_TRUE(fs::exists(dir.str() + "/checkpoint.bin"));
  ASSERT_TRUE(fs::exists(dir.str() + "/checkpoint.json"));

  CheckpointMeta got;
  const Model<float> r = load_checkpoint<float>(dir.str(), &got);
  EXPECT_TRUE(r.params() == m.params());
  EXPECT_EQ(got.seed, meta.seed);
  EXPECT_EQ(got.epoch, meta.epoch);
  EXPECT_EQ(got.val_miou, meta.val_miou);
  EXPECT_EQ(r.config().n_decoders, 3);

  // Cross-precision load widens the same bit patterns.
  const Model<double> wide = load_checkpoint<double>(dir.str());
  for (size_t i = 0; i < wide.params().size(); ++i)
    ASSERT_EQ(wide.params()[i], double(m.params()[i]));
}

TEST(Checkpoint, DoubleToFloatNarrows) {
  TempDir dir;
  Model<double> m(tiny_arch(1));
  m.init_params(5);
  save_checkpoint(m, dir.str(), CheckpointMeta{});
  const Model<float> r = load_checkpoint<float>(dir.str());
  for (size_t i = 0; i < r.params().size(); ++i)
    ASSERT_EQ(r.params()[i], float(m.params()[i]));
}

TEST(Checkpoint, CorruptHeaderAndMissingFilesAreDataErrors) {
  TempDir dir;
  Model<float> m(tiny_arch(1));
  m.init_params(1);
  save_checkpoint(m, dir.str(), CheckpointMeta{});
  {
    std::fstream f(dir.str() + "/checkpoint.bin",
                   std::ios::binary | std::ios::in | std::ios::out);
    f.write("XXXXXXXX", 8);
  }
  EXPECT_THROW(load_checkpoint<float>(dir.str()), DataError);

  TempDir empty;
  EXPECT_THROW(load_checkpoint<float>(empty.str()), DataError);
}

TEST(Checkpoint, ArchitectureMismatchIsDataError) {
  TempDir a, b;
  Model<float> small(tiny_arch(1)), big(tiny_arch(3));
  small.init_params(1);
  big.init_params(1);
  save_checkpoint(small, a.str(), CheckpointMeta{});
  save_checkpoint(big, b.str(), CheckpointMeta{});
  // Manifest promises the big architecture but the blob holds the small one.
  fs::copy_file(b.str() + "/checkpoint.json", a.str() + "/checkpoint.json",
                fs::copy_options::overwrite_existing);
  EXPECT_THROW(load_checkpoint<float>(a.str()), DataError);
}

}  // namespace
}  // namespace branchseg
