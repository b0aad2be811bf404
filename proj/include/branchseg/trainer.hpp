// branchseg/trainer.hpp -- the seeded end-to-end training loop: Adam on the
// combined objective over augmented scribble batches, per-epoch validation,
// best-checkpoint tracking, and metrics logging.
//
// Determinism contract: all stochastic choices come from four named streams
// derived from cfg.seed (data_order, augment, dropout, lambda), so draws on
// one stream never shift another. Single-threaded runs with a fixed seed
// reproduce the metrics values bit for bit; only the wall-clock column varies.
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

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "branchseg/common.hpp"
#include "branchseg/dataio.hpp"
#include "branchseg/losses.hpp"
#include "branchseg/metrics.hpp"
#include "branchseg/network.hpp"

namespace branchseg {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 16;
  int epochs = 200;
  double gamma = 0.5;        // consistency weight in the combined loss
  double lambda_main = 0.5;  // fixed mixing weight of the main decoder
  uint64_t seed = 0;
  AugmentConfig augment;
  bool normalize_inputs = true;
  ConsistencyDistance consistency_distance =
      ConsistencyDistance::kCrossEntropyPseudoLabel;
  Regularizer regularizer = Regularizer::kSharedConsistency;
  int gamma_rampup_epochs = 0;  // 0 = constant gamma from the first step
  enum class ValidateOn { kFullMask, kScribble };
  ValidateOn validate_on = ValidateOn::kFullMask;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (learning_rate <= 0.0) throw ConfigError("train.learning_rate: must be > 0");
    if (batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
    if (epochs < 0) throw ConfigError("train.epochs: must be >= 0");
    if (gamma < 0.0) throw ConfigError("train.gamma: must be >= 0");
    if (lambda_main < 0.0 || lambda_main > 1.0)
      throw ConfigError("train.lambda_main: must be in [0,1]");
    if (gamma_rampup_epochs < 0)
      throw ConfigError("train.gamma_rampup_epochs: must be >= 0");
    if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 ||
        adam_beta2 >= 1.0)
      throw ConfigError("train.adam_beta: must be in [0,1)");
    if (adam_eps <= 0.0) throw ConfigError("train.adam_eps: must be > 0");
    augment.validate();
  }
};

struct EpochRow {
  int epoch = 0;
  double l_sup = 0.0, l_cons = 0.0, l_total = 0.0;
  double val_miou = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRow> rows;
  int best_epoch = 0;
  double best_val_miou = 0.0;
  std::string validation_metric;  // "miou_full_mask" or "labeled_accuracy"
  std::string checkpoint_dir;

  const EpochRow* row(int epoch) const {
    for (const auto& r : rows)
      if (r.epoch == epoch) return &r;
    return nullptr;
  }
};

inline constexpr const char* kMetricsHeader =
    "epoch,l_sup,l_cons,l_total,val_miou,seconds";

inline void write_metrics_csv(const std::string& path,
                              const std::vector<EpochRow>& rows) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << kMetricsHeader << "\n";
  for (const auto& r : rows)
    f << r.epoch << ',' << format_g17(r.l_sup) << ',' << format_g17(r.l_cons)
      << ',' << format_g17(r.l_total) << ',' << format_g17(r.val_miou) << ','
      << format_g17(r.seconds) << "\n";
}

inline std::vector<EpochRow> read_metrics_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("missing metrics file " + path);
  std::string line;
  if (!std::getline(f, line) || line != kMetricsHeader)
    throw DataError("bad metrics header in " + path);
  std::vector<EpochRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    double v[6];
    for (int i = 0; i < 6; ++i) {
      if (!std::getline(ss, field, ','))
        throw DataError("short metrics row in " + path);
      v[i] = std::strtod(field.c_str(), nullptr);
    }
    rows.push_back({int(v[0]), v[1], v[2], v[3], v[4], v[5]});
  }
  return rows;
}

template <typename Scalar>
class Trainer {
 public:
  Trainer(Model<Scalar>* model, const TrainConfig& cfg)
      : model_(model),
        cfg_(cfg),
        rng_order_(cfg.seed, "data_order"),
        rng_aug_(cfg.seed, "augment"),
        rng_drop_(cfg.seed, "dropout"),
        rng_lambda_(cfg.seed, "lambda") {
    cfg_.validate();
    const int K = model->config().n_decoders;
    const bool baseline = cfg_.regularizer != Regularizer::kSharedConsistency &&
                          cfg_.regularizer != Regularizer::kNone;
    if (baseline && K != 1)
      throw ConfigError(
          "train.regularizer: baseline regularizers replace the consistency "
          "term on a single-decoder model (n_decoders=1), got K=" +
          std::to_string(K));
    grad_.assign(model->n_params(), Scalar(0));
    m_.assign(model->n_params(), 0.0);
    v_.assign(model->n_params(), 0.0);
    gamma_eff_ = effective_gamma(1);
  }

  // Optional learning-rate schedule: (epoch, base_lr) -> lr. Default constant.
  std::function<double(int, double)> lr_schedule;

  // One optimizer iteration: forward all decoders on every batch image with
  // fresh dropout plans, one shared set of pair mixing weights for the whole
  // batch, analytic gradients, one Adam update.
  LossBreakdown step(const std::vector<const Sample*>& batch) {
    if (batch.empty()) throw DataError("step: empty batch");
    const int K = model_->config().n_decoders;
    const auto mixes = draw_pair_mixes(K, cfg_.lambda_main, &rng_lambda_);
    last_mixes_ = mixes;
    std::fill(grad_.begin(), grad_.end(), Scalar(0));

    double sup_sum = 0.0, cons_sum = 0.0;
    const double bs = 1.0 / double(batch.size());
    for (const Sample* sp : batch) {
      Sample s = augment(*sp, cfg_.augment, &rng_aug_);
      const Image img =
          cfg_.normalize_inputs ? normalize(s.image) : s.image;
      const auto plan =
          model_->draw_dropout_plan(img.height(), img.width(), &rng_drop_);
      Tape<Scalar> tape;
      const auto logits =
          model_->forward_logits(img, Mode::kTrain, &plan, &tape);

      std::vector<Tensor3<double>> z;
      std::vector<Tensor3<double>> dz;
      z.reserve(logits.size());
      for (const auto& l : logits) {
        z.push_back(Model<Scalar>::to_double(l));
        dz.emplace_back(l.channels(), l.height(), l.width(), 0.0);
      }

      LossBreakdown lb;
      if (cfg_.regularizer == Regularizer::kSharedConsistency) {
        lb = combined_loss_grad(z, s.annotation, gamma_eff_, mixes,
                                cfg_.consistency_distance, &dz, bs);
      } else {
        lb = combined_loss_grad(z, s.annotation, 0.0, {},
                                cfg_.consistency_distance, &dz, bs);
        if (cfg_.regularizer != Regularizer::kNone) {
          lb.l_cons = regularizer_loss_grad(cfg_.regularizer, img, z[0],
                                            s.annotation, &dz[0],
                                            bs * gamma_eff_);
          lb.gamma = gamma_eff_;
          lb.l_total = lb.l_sup + gamma_eff_ * lb.l_cons;
        }
      }
      sup_sum += lb.l_sup;
      cons_sum += lb.l_cons;

      std::vector<Tensor3<Scalar>> dzs;
      dzs.reserve(dz.size());
      for (const auto& g : dz) {
        Tensor3<Scalar> t(g.channels(), g.height(), g.width());
        for (size_t i = 0; i < g.size(); ++i) t[i] = Scalar(g[i]);
        dzs.push_back(std::move(t));
      }
      model_->backward(tape, dzs, &grad_);
    }

    LossBreakdown out;
    out.gamma = gamma_eff_;
    out.l_sup = sup_sum * bs;
    out.l_cons = cons_sum * bs;
    out.l_total = out.l_sup + gamma_eff_ * out.l_cons;
    if (!std::isfinite(out.l_total))
      throw std::runtime_error(
          "training diverged: non-finite loss at epoch " +
          std::to_string(epoch_) + " batch " + std::to_string(batch_index_) +
          " (l_sup=" + format_g17(out.l_sup) +
          ", l_cons=" + format_g17(out.l_cons) + ")");
    adam_update();
    return out;
  }

  // Main-decoder validation. Uses mIoU against full masks when the samples
  // carry them (and cfg asks for it); otherwise accuracy over labeled pixels.
  double validate(const std::vector<const Sample*>& val_set,
                  std::string* metric_name) const {
    bool have_masks = !val_set.empty();
    for (const Sample* s : val_set)
      if (!s->full_mask) have_masks = false;
    const bool use_miou =
        cfg_.validate_on == TrainConfig::ValidateOn::kFullMask && have_masks;
    if (metric_name)
      *metric_name = use_miou ? "miou_full_mask" : "labeled_accuracy";
    if (val_set.empty()) return 0.0;

    double acc = 0.0;
    for (const Sample* s : val_set) {
      const Image img =
          cfg_.normalize_inputs ? normalize(s->image) : s->image;
      const FullMask pred = model_->segment(img);
      if (use_miou) {
        acc += miou(pred, *s->full_mask, model_->config().n_classes).mean;
      } else {
        long ok = 0, labeled = 0;
        for (size_t i = 0; i < s->annotation.size(); ++i) {
          if (s->annotation[i] == kUnlabeled) continue;
          ++labeled;
          ok += (pred[i] == s->annotation[i]);
        }
        acc += labeled ? double(ok) / double(labeled) : 1.0;
      }
    }
    return acc / double(val_set.size());
  }

  TrainReport train(const std::vector<const Sample*>& train_set,
                    const std::vector<const Sample*>& val_set,
                    const std::string& out_dir = "") {
    if (cfg_.epochs > 0 && train_set.empty())
      throw DataError("train: empty training set");
    TrainReport rep;
    rep.checkpoint_dir = out_dir;
    validate(val_set, &rep.validation_metric);

    BatchStream stream(train_set, cfg_.batch_size);
    std::vector<Scalar> best_params;
    int best_epoch = 0;
    double best_val = -std::numeric_limits<double>::infinity();

    for (int epoch = 1; epoch <= cfg_.epochs; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      epoch_ = epoch;
      gamma_eff_ = effective_gamma(epoch);
      stream.shuffle(&rng_order_);
      double sup = 0.0, cons = 0.0;
      const size_t nb = stream.n_batches();
      for (size_t b = 0; b < nb; ++b) {
        batch_index_ = b;
        const auto lb = step(stream.batch(b));
        sup += lb.l_sup;
        cons += lb.l_cons;
      }
      EpochRow row;
      row.epoch = epoch;
      row.l_sup = sup / double(nb);
      row.l_cons = cons / double(nb);
      row.l_total = row.l_sup + gamma_eff_ * row.l_cons;
      row.val_miou = validate(val_set, nullptr);
      row.seconds = std::chrono::duration<double>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
      rep.rows.push_back(row);

      if (row.val_miou > best_val) {
        best_val = row.val_miou;
        best_epoch = epoch;
        best_params = model_->params();
      }
    }

    if (!best_params.empty()) {
      // The model keeps the best-validation weights, mirroring what a
      // checkpoint consumer would load.
      model_->params() = best_params;
      rep.best_epoch = best_epoch;
      rep.best_val_miou = best_val;
      if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        save_checkpoint(*model_, out_dir,
                        {cfg_.seed, best_epoch, best_val});
      }
    }
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      write_metrics_csv(out_dir + "/metrics.csv", rep.rows);
    }
    return rep;
  }

  const TrainConfig& config() const { return cfg_; }
  const std::vector<Scalar>& last_grad() const { return grad_; }
  // Mixing weights drawn by the most recent step; exposed so the
  // stream-isolation guarantee stays observable.
  const std::vector<PairMix>& last_mixes() const { return last_mixes_; }
  const std::vector<double>& adam_m() const { return m_; }
  const std::vector<double>& adam_v() const { return v_; }
  long adam_t() const { return t_; }

 private:
  double effective_gamma(int epoch) const {
    if (cfg_.gamma_rampup_epochs <= 0) return cfg_.gamma;
    return cfg_.gamma *
           std::min(1.0, double(epoch) / cfg_.gamma_rampup_epochs);
  }

  void adam_update() {
    ++t_;
    const double lr = lr_schedule ? lr_schedule(epoch_, cfg_.learning_rate)
                                  : cfg_.learning_rate;
    const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, double(t_));
    const double c2 = 1.0 - std::pow(b2, double(t_));
    auto& p = model_->params();
    for (size_t i = 0; i < p.size(); ++i) {
      const double g = double(grad_[i]);
      m_[i] = b1 * m_[i] + (1.0 - b1) * g;
      v_[i] = b2 * v_[i] + (1.0 - b2) * g * g;
      p[i] -= Scalar(lr * (m_[i] / c1) /
                     (std::sqrt(v_[i] / c2) + cfg_.adam_eps));
    }
  }

  Model<Scalar>* model_;
  TrainConfig cfg_;
  RandomStream rng_order_, rng_aug_, rng_drop_, rng_lambda_;
  std::vector<PairMix> last_mixes_;
  std::vector<Scalar> grad_;
  std::vector<double> m_, v_;
  long t_ = 0;
  int epoch_ = 1;
  size_t batch_index_ = 0;
  double gamma_eff_ = 0.0;
};

}  // namespace branchseg
