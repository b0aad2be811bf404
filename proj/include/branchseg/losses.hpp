// branchseg/losses.hpp -- partial cross-entropy on scribbles, mixed
// pseudo-label generation, pairwise shared consistency, the combined
// objective, and baseline weak-supervision regularizers. All loss math runs
// in double; gradients are analytic and fused through the softmax.
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

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "branchseg/common.hpp"
#include "branchseg/types.hpp"

namespace branchseg {

// Probabilities are clamped away from zero inside logs only.
inline constexpr double kLogEps = 1e-12;

// Convex weights over the K decoders; lambda[0] belongs to the main decoder
// and is a fixed configured constant, the rest are resampled per iteration.
struct MixWeights {
  std::vector<double> lambda;

  double sum() const {
    double s = 0.0;
    for (double v : lambda) s += v;
    return s;
  }
};

// Hard class map derived by argmax from a probability mixture. Carries no
// gradient by construction (integer labels).
struct PseudoLabel {
  Tensor2<uint8_t> labels;
  std::vector<int> source_decoders;
  std::vector<double> source_weights;
};

struct LossBreakdown {
  double l_sup = 0.0;
  double l_cons = 0.0;
  double l_total = 0.0;
  double gamma = 0.0;
};

enum class ConsistencyDistance {
  kCrossEntropyPseudoLabel,  // CE of each decoder against the pair's mixed PL
  kMsePairwise,              // MSE between the pair's soft maps
};

inline ConsistencyDistance consistency_distance_from_string(
    const std::string& s) {
  if (s == "ce_pl") return ConsistencyDistance::kCrossEntropyPseudoLabel;
  if (s == "mse") return ConsistencyDistance::kMsePairwise;
  throw ConfigError("consistency_distance: expected 'ce_pl' or 'mse', got '" +
                    s + "'");
}

// ---------------------------------------------------------------------------
// Supervised part: cross-entropy over labeled pixels only
// ---------------------------------------------------------------------------

// Mean over labeled pixels of -log p(annotated class). Unlabeled pixels
// contribute neither value nor gradient; an all-unlabeled map yields 0 so
// fully-unlabeled batches stay legal.
inline double partial_cross_entropy(const ProbMap& prob,
                                    const AnnotationMap& ann) {
  if (prob.height() != ann.height() || prob.width() != ann.width())
    throw ShapeError("partial_cross_entropy: prob " + prob.shape_str() +
                     " vs annotation " + std::to_string(ann.height()) + "x" +
                     std::to_string(ann.width()));
  const size_t n = ann.size();
  double acc = 0.0;
  int labeled = 0;
  for (size_t i = 0; i < n; ++i) {
    const uint8_t a = ann[i];
    if (a == kUnlabeled) continue;
    acc -= std::log(std::max(prob[size_t(a) * n + i], kLogEps));
    ++labeled;
  }
  return labeled ? acc / labeled : 0.0;
}

// ---------------------------------------------------------------------------
// Mix weights and pseudo-labels
// ---------------------------------------------------------------------------

// lambda[0] = lambda_main; the rest are uniform on the simplex scaled to
// 1 - lambda_main (normalized iid Exp(1) draws).
inline MixWeights sample_mix_weights(int K, double lambda_main,
                                     RandomStream* rng) {
  if (K < 1) throw ConfigError("mix_weights: K must be >= 1");
  if (lambda_main < 0.0 || lambda_main > 1.0)
    throw ConfigError("mix_weights: lambda_main must be in [0,1]");
  if (K == 1) {
    if (lambda_main != 1.0)
      throw ConfigError("mix_weights: K=1 requires lambda_main = 1");
    return {{1.0}};
  }
  MixWeights w;
  w.lambda.resize(size_t(K));
  w.lambda[0] = lambda_main;
  double sum = 0.0;
  for (int d = 1; d < K; ++d) {
    const double e = -std::log(1.0 - rng->uniform());  // Exp(1)
    w.lambda[size_t(d)] = e;
    sum += e;
  }
  const double rest = 1.0 - lambda_main;
  if (sum > 0.0) {
    for (int d = 1; d < K; ++d) w.lambda[size_t(d)] *= rest / sum;
  } else {
    for (int d = 1; d < K; ++d) w.lambda[size_t(d)] = rest / (K - 1);
  }
  return w;
}

// Per-pixel argmax of the convex combination of the K probability maps.
// Ties break toward background (class 0).
inline PseudoLabel mix_and_harden(std::span<const ProbMap> probs,
                                  const MixWeights& weights) {
  if (probs.empty()) throw ShapeError("mix_and_harden: no probability maps");
  if (weights.lambda.size() != probs.size())
    throw ShapeError("mix_and_harden: " + std::to_string(probs.size()) +
                     " maps vs " + std::to_string(weights.lambda.size()) +
                     " weights");
  for (const auto& p : probs) require_same_shape(probs[0], p, "mix_and_harden");

  const int C = probs[0].channels();
  const size_t n = probs[0].plane();
  PseudoLabel pl;
  pl.labels = Tensor2<uint8_t>(probs[0].height(), probs[0].width());
  pl.source_weights = weights.lambda;
  for (size_t d = 0; d < probs.size(); ++d) pl.source_decoders.push_back(int(d));

  for (size_t i = 0; i < n; ++i) {
    int best = 0;
    double best_v = 0.0;
    for (int c = 0; c < C; ++c) {
      double v = 0.0;
      for (size_t d = 0; d < probs.size(); ++d)
        v += weights.lambda[d] * probs[d][size_t(c) * n + i];
      if (c == 0 || v > best_v) {
        best = c;
        best_v = v;
      }
    }
    pl.labels[i] = uint8_t(best);
  }
  return pl;
}

// ---------------------------------------------------------------------------
// Pairwise shared consistency
// ---------------------------------------------------------------------------

// One unordered decoder pair and the mixing weight on its first member.
// Pairs containing the main decoder use the fixed lambda_main; the rest draw
// a fresh uniform value each iteration.
struct PairMix {
  int d1, d2;
  double lambda;
};

inline std::vector<PairMix> draw_pair_mixes(int K, double lambda_main,
                                            RandomStream* rng) {
  std::vector<PairMix> mixes;
  for (int d1 = 0; d1 < K; ++d1)
    for (int d2 = d1 + 1; d2 < K; ++d2) {
      const double lam = (d1 == 0) ? lambda_main : rng->uniform();
      mixes.push_back({d1, d2, lam});
    }
  return mixes;
}

inline PseudoLabel pair_pseudo_label(const ProbMap& p1, const ProbMap& p2,
                                     const PairMix& mix) {
  const ProbMap pair[2] = {p1, p2};
  auto pl = mix_and_harden(std::span<const ProbMap>(pair, 2),
                           MixWeights{{mix.lambda, 1.0 - mix.lambda}});
  pl.source_decoders = {mix.d1, mix.d2};
  return pl;
}

namespace detail {

// Per-pair distance averaged over unlabeled pixels.
inline double pair_distance(const ProbMap& p1, const ProbMap& p2,
                            const AnnotationMap& ann, const PseudoLabel& pl,
                            ConsistencyDistance dist) {
  const size_t n = ann.size();
  const int C = p1.channels();
  double acc = 0.0;
  int unlabeled = 0;
  for (size_t i = 0; i < n; ++i) {
    if (ann[i] != kUnlabeled) continue;
    ++unlabeled;
    if (dist == ConsistencyDistance::kCrossEntropyPseudoLabel) {
      const size_t c = size_t(pl.labels[i]);
      acc -= std::log(std::max(p1[c * n + i], kLogEps));
      acc -= std::log(std::max(p2[c * n + i], kLogEps));
    } else {
      for (int c = 0; c < C; ++c) {
        const double d = p1[size_t(c) * n + i] - p2[size_t(c) * n + i];
        acc += d * d;
      }
    }
  }
  return unlabeled ? acc / unlabeled : 0.0;
}

}  // namespace detail

// Deterministic core: consistency value for explicit pair mixes.
// Aggregation: mean over pairs, mean over unlabeled pixels, 1/K prefactor.
inline double shared_consistency_with(std::span<const ProbMap> probs,
                                      const AnnotationMap& ann,
                                      std::span<const PairMix> mixes,
                                      ConsistencyDistance dist) {
  const int K = int(probs.size());
  if (K < 2) return 0.0;
  for (const auto& p : probs)
    require_same_shape(probs[0], p, "shared_consistency");
  if (probs[0].height() != ann.height() || probs[0].width() != ann.width())
    throw ShapeError("shared_consistency: prob/annotation shape mismatch");

  double acc = 0.0;
  for (const auto& mix : mixes) {
    const auto pl =
        pair_pseudo_label(probs[size_t(mix.d1)], probs[size_t(mix.d2)], mix);
    acc += detail::pair_distance(probs[size_t(mix.d1)], probs[size_t(mix.d2)],
                                 ann, pl, dist);
  }
  return acc / (double(K) * double(mixes.size()));
}

// Pairwise pseudo-label supervision over unlabeled pixels: each pair's
// dynamically mixed hard pseudo-label supervises both members. K=1 has no
// pairs and returns exactly 0 (a one-decoder model trains without pseudo
// labeling).
inline double shared_consistency(std::span<const ProbMap> probs,
                                 const AnnotationMap& ann, RandomStream* rng,
                                 double lambda_main,
                                 ConsistencyDistance dist =
                                     ConsistencyDistance::kCrossEntropyPseudoLabel) {
  const int K = int(probs.size());
  if (K < 2) return 0.0;
  const auto mixes = draw_pair_mixes(K, lambda_main, rng);
  return shared_consistency_with(probs, ann, mixes, dist);
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

inline LossBreakdown combined_loss_with(std::span<const ProbMap> probs,
                                        const AnnotationMap& ann, double gamma,
                                        std::span<const PairMix> mixes,
                                        ConsistencyDistance dist) {
  if (gamma < 0.0) throw ConfigError("gamma: must be >= 0");
  if (probs.empty()) throw ShapeError("combined_loss: no probability maps");
  const int K = int(probs.size());
  LossBreakdown out;
  out.gamma = gamma;
  for (const auto& p : probs) out.l_sup += partial_cross_entropy(p, ann);
  out.l_sup /= K;
  out.l_cons = shared_consistency_with(probs, ann, mixes, dist);
  out.l_total = out.l_sup + gamma * out.l_cons;
  return out;
}

inline LossBreakdown combined_loss(std::span<const ProbMap> probs,
                                   const AnnotationMap& ann, double gamma,
                                   RandomStream* rng, double lambda_main,
                                   ConsistencyDistance dist =
                                       ConsistencyDistance::kCrossEntropyPseudoLabel) {
  const auto mixes = draw_pair_mixes(int(probs.size()), lambda_main, rng);
  return combined_loss_with(probs, ann, gamma, mixes, dist);
}

// ---------------------------------------------------------------------------
// Softmax and the fused gradient path (logits -> loss, d loss / d logits)
// ---------------------------------------------------------------------------

inline ProbMap softmax(const Tensor3<double>& logits) {
  const int C = logits.channels();
  const size_t n = logits.plane();
  ProbMap p(C, logits.height(), logits.width());
  for (size_t i = 0; i < n; ++i) {
    double mx = logits[i];
    for (int c = 1; c < C; ++c) mx = std::max(mx, logits[size_t(c) * n + i]);
    double sum = 0.0;
    for (int c = 0; c < C; ++c) {
      const double e = std::exp(logits[size_t(c) * n + i] - mx);
      p[size_t(c) * n + i] = e;
      sum += e;
    }
    for (int c = 0; c < C; ++c) p[size_t(c) * n + i] /= sum;
  }
  return p;
}

namespace detail {

// dL/dlogit = p * (g - sum_j g_j p_j) for per-pixel softmax, g = dL/dprob.
// `g` and `dz` are C x n views at one pixel handled by the caller loops.
inline void softmax_backward_pixel(const double* p, const double* g, int C,
                                   size_t stride, size_t i, double* dz) {
  double dot = 0.0;
  for (int c = 0; c < C; ++c) dot += g[size_t(c) * stride + i] * p[size_t(c) * stride + i];
  for (int c = 0; c < C; ++c)
    dz[size_t(c) * stride + i] +=
        p[size_t(c) * stride + i] * (g[size_t(c) * stride + i] - dot);
}

}  // namespace detail

// Evaluates the combined objective from decoder logits and accumulates
// analytic gradients w.r.t. every logit into `dlogits` (which must be
// zero-initialized by the caller or carry a running batch sum).
//
// `pls`, when non-null, overrides the per-pair pseudo-labels; the gradient
// treats pseudo-labels as constants either way (stop-gradient contract).
inline LossBreakdown combined_loss_grad(std::span<const Tensor3<double>> logits,
                                        const AnnotationMap& ann, double gamma,
                                        std::span<const PairMix> mixes,
                                        ConsistencyDistance dist,
                                        std::vector<Tensor3<double>>* dlogits,
                                        double batch_scale = 1.0,
                                        const std::vector<PseudoLabel>* pls =
                                            nullptr) {
  if (gamma < 0.0) throw ConfigError("gamma: must be >= 0");
  const int K = int(logits.size());
  if (K < 1) throw ShapeError("combined_loss_grad: no logit maps");
  if (dlogits->size() != logits.size())
    throw ShapeError("combined_loss_grad: dlogits size mismatch");

  std::vector<ProbMap> probs;
  probs.reserve(size_t(K));
  for (const auto& z : logits) probs.push_back(softmax(z));
  const int C = probs[0].channels();
  const size_t n = probs[0].plane();

  std::vector<PseudoLabel> local_pls;
  if (!pls) {
    for (const auto& mix : mixes)
      local_pls.push_back(pair_pseudo_label(probs[size_t(mix.d1)],
                                            probs[size_t(mix.d2)], mix));
  }
  const std::vector<PseudoLabel>& pair_pls = pls ? *pls : local_pls;

  // Value via the same routines as the public ops.
  LossBreakdown out;
  out.gamma = gamma;
  for (const auto& p : probs) out.l_sup += partial_cross_entropy(p, ann);
  out.l_sup /= K;
  if (K >= 2 && !mixes.empty()) {
    double acc = 0.0;
    for (size_t m = 0; m < mixes.size(); ++m)
      acc += detail::pair_distance(probs[size_t(mixes[m].d1)],
                                   probs[size_t(mixes[m].d2)], ann,
                                   pair_pls[m], dist);
    out.l_cons = acc / (double(K) * double(mixes.size()));
  }
  out.l_total = out.l_sup + gamma * out.l_cons;

  // Supervised gradient: (p - onehot) / (K * |labeled|), labeled pixels only.
  int labeled = 0, unlabeled = 0;
  for (size_t i = 0; i < ann.size(); ++i)
    (ann[i] == kUnlabeled ? unlabeled : labeled) += 1;

  if (labeled > 0) {
    const double ws = batch_scale / (double(K) * labeled);
    for (int d = 0; d < K; ++d) {
      auto& dz = (*dlogits)[size_t(d)];
      const auto& p = probs[size_t(d)];
      for (size_t i = 0; i < ann.size(); ++i) {
        if (ann[i] == kUnlabeled) continue;
        for (int c = 0; c < C; ++c)
          dz[size_t(c) * n + i] += ws * p[size_t(c) * n + i];
        dz[size_t(ann[i]) * n + i] -= ws;
      }
    }
  }

  // Consistency gradient over unlabeled pixels.
  if (K >= 2 && !mixes.empty() && unlabeled > 0 && gamma > 0.0) {
    const double wc =
        batch_scale * gamma / (double(K) * double(mixes.size()) * unlabeled);
    for (size_t m = 0; m < mixes.size(); ++m) {
      const auto& mix = mixes[m];
      const auto& pl = pair_pls[m];
      const auto& p1 = probs[size_t(mix.d1)];
      const auto& p2 = probs[size_t(mix.d2)];
      auto& dz1 = (*dlogits)[size_t(mix.d1)];
      auto& dz2 = (*dlogits)[size_t(mix.d2)];
      if (dist == ConsistencyDistance::kCrossEntropyPseudoLabel) {
        for (size_t i = 0; i < ann.size(); ++i) {
          if (ann[i] != kUnlabeled) continue;
          const size_t t = size_t(pl.labels[i]);
          for (int c = 0; c < C; ++c) {
            dz1[size_t(c) * n + i] += wc * p1[size_t(c) * n + i];
            dz2[size_t(c) * n + i] += wc * p2[size_t(c) * n + i];
          }
          dz1[t * n + i] -= wc;
          dz2[t * n + i] -= wc;
        }
      } else {
        for (size_t i = 0; i < ann.size(); ++i) {
          if (ann[i] != kUnlabeled) continue;
          // dD/dp1 = 2(p1-p2), dD/dp2 = -2(p1-p2); push through softmax.
          double dot1 = 0.0, dot2 = 0.0;
          for (int c = 0; c < C; ++c) {
            const double g = 2.0 * (p1[size_t(c) * n + i] - p2[size_t(c) * n + i]);
            dot1 += g * p1[size_t(c) * n + i];
            dot2 += (-g) * p2[size_t(c) * n + i];
          }
          for (int c = 0; c < C; ++c) {
            const double g = 2.0 * (p1[size_t(c) * n + i] - p2[size_t(c) * n + i]);
            dz1[size_t(c) * n + i] += wc * p1[size_t(c) * n + i] * (g - dot1);
            dz2[size_t(c) * n + i] += wc * p2[size_t(c) * n + i] * (-g - dot2);
          }
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Baseline weak-supervision regularizers (single-decoder comparisons)
// ---------------------------------------------------------------------------

enum class Regularizer {
  kNone,
  kSharedConsistency,
  kEntropyMin,
  kTotalVariation,
  kMumfordShah,
};

inline Regularizer regularizer_from_string(const std::string& s) {
  if (s == "none") return Regularizer::kNone;
  if (s == "consistency") return Regularizer::kSharedConsistency;
  if (s == "entropy_min") return Regularizer::kEntropyMin;
  if (s == "total_variation") return Regularizer::kTotalVariation;
  if (s == "mumford_shah") return Regularizer::kMumfordShah;
  throw ConfigError(
      "regularizer: expected none|consistency|entropy_min|total_variation|"
      "mumford_shah, got '" + s + "'");
}

inline std::string to_string(Regularizer r) {
  switch (r) {
    case Regularizer::kNone: return "none";
    case Regularizer::kSharedConsistency: return "consistency";
    case Regularizer::kEntropyMin: return "entropy_min";
    case Regularizer::kTotalVariation: return "total_variation";
    case Regularizer::kMumfordShah: return "mumford_shah";
  }
  return "?";
}

// Mean over unlabeled pixels of the per-pixel prediction entropy.
inline double entropy_min_loss(const ProbMap& prob, const AnnotationMap& ann) {
  if (prob.height() != ann.height() || prob.width() != ann.width())
    throw ShapeError("entropy_min_loss: shape mismatch");
  const int C = prob.channels();
  const size_t n = ann.size();
  double acc = 0.0;
  int unlabeled = 0;
  for (size_t i = 0; i < n; ++i) {
    if (ann[i] != kUnlabeled) continue;
    ++unlabeled;
    for (int c = 0; c < C; ++c) {
      const double p = prob[size_t(c) * n + i];
      if (p > 0.0) acc -= p * std::log(p);
    }
  }
  return unlabeled ? acc / unlabeled : 0.0;
}

// Mean anisotropic total variation of the foreground probability channel.
inline double total_variation_loss(const ProbMap& prob,
                                   const AnnotationMap& ann) {
  if (prob.height() != ann.height() || prob.width() != ann.width())
    throw ShapeError("total_variation_loss: shape mismatch");
  const int H = prob.height(), W = prob.width();
  const size_t n = prob.plane();
  const double* fg = prob.data() + size_t(kForeground) * n;
  double acc = 0.0;
  long terms = 0;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const double v = fg[size_t(r) * W + c];
      if (c + 1 < W) {
        acc += std::abs(fg[size_t(r) * W + c + 1] - v);
        ++terms;
      }
      if (r + 1 < H) {
        acc += std::abs(fg[size_t(r + 1) * W + c] - v);
        ++terms;
      }
    }
  return terms ? acc / terms : 0.0;
}

inline constexpr double kMumfordShahTvWeight = 1e-4;

// Piecewise-constant fidelity: for each class, the softly-assigned intensity
// variance around the p-weighted mean, plus a small TV smoothness term.
inline double mumford_shah_loss(const Image& image, const ProbMap& prob,
                                const AnnotationMap& ann) {
  if (prob.height() != image.height() || prob.width() != image.width())
    throw ShapeError("mumford_shah_loss: shape mismatch");
  const int C = prob.channels();
  const size_t n = prob.plane();
  double acc = 0.0;
  for (int c = 0; c < C; ++c) {
    const double* pc = prob.data() + size_t(c) * n;
    double wsum = 0.0, isum = 0.0;
    for (size_t i = 0; i < n; ++i) {
      wsum += pc[i];
      isum += pc[i] * image[i];
    }
    const double mu = wsum > kLogEps ? isum / wsum : 0.0;
    double fit = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double d = image[i] - mu;
      fit += pc[i] * d * d;
    }
    acc += fit / double(n);
  }
  return acc + kMumfordShahTvWeight * total_variation_loss(prob, ann);
}

namespace detail {

// Gradient of mean anisotropic TV w.r.t. the foreground channel,
// accumulated with the given weight.
inline void tv_grad_fg(const ProbMap& prob, double weight, Tensor3<double>* g) {
  const int H = prob.height(), W = prob.width();
  const size_t n = prob.plane();
  const double* fg = prob.data() + size_t(kForeground) * n;
  double* gf = g->data() + size_t(kForeground) * n;
  const long terms = long(H) * (W - 1) + long(H - 1) * W;
  if (terms == 0) return;
  const double w = weight / terms;
  auto sgn = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const size_t i = size_t(r) * W + c;
      if (c + 1 < W) {
        const double s = sgn(fg[i + 1] - fg[i]);
        gf[i + 1] += w * s;
        gf[i] -= w * s;
      }
      if (r + 1 < H) {
        const double s = sgn(fg[i + W] - fg[i]);
        gf[i + W] += w * s;
        gf[i] -= w * s;
      }
    }
}

}  // namespace detail

// Value of the named regularizer plus `weight` times its gradient w.r.t. the
// logits, accumulated into `dlogits`. Used by the single-decoder baseline
// training mode.
inline double regularizer_loss_grad(Regularizer reg, const Image& image,
                                    const Tensor3<double>& logits,
                                    const AnnotationMap& ann,
                                    Tensor3<double>* dlogits, double weight) {
  const ProbMap p = softmax(logits);
  const int C = p.channels();
  const size_t n = p.plane();
  Tensor3<double> gp(C, p.height(), p.width(), 0.0);  // dR/dprob

  double value = 0.0;
  switch (reg) {
    case Regularizer::kEntropyMin: {
      value = entropy_min_loss(p, ann);
      int unlabeled = 0;
      for (size_t i = 0; i < n; ++i) unlabeled += (ann[i] == kUnlabeled);
      if (unlabeled == 0) return 0.0;
      const double w = 1.0 / unlabeled;
      for (size_t i = 0; i < n; ++i) {
        if (ann[i] != kUnlabeled) continue;
        for (int c = 0; c < C; ++c) {
          const double pc = std::max(p[size_t(c) * n + i], kLogEps);
          gp[size_t(c) * n + i] = w * (-std::log(pc) - 1.0);
        }
      }
      break;
    }
    case Regularizer::kTotalVariation: {
      value = total_variation_loss(p, ann);
      detail::tv_grad_fg(p, 1.0, &gp);
      break;
    }
    case Regularizer::kMumfordShah: {
      value = mumford_shah_loss(image, p, ann);
      // d fit_c / dp_c(i) = (I_i - mu_c)^2 / n; the mu-dependence term
      // vanishes because sum_i p_c(i) (I_i - mu_c) = 0 at the weighted mean.
      for (int c = 0; c < C; ++c) {
        const double* pc = p.data() + size_t(c) * n;
        double wsum = 0.0, isum = 0.0;
        for (size_t i = 0; i < n; ++i) {
          wsum += pc[i];
          isum += pc[i] * image[i];
        }
        const double mu = wsum > kLogEps ? isum / wsum : 0.0;
        for (size_t i = 0; i < n; ++i) {
          const double d = image[i] - mu;
          gp[size_t(c) * n + i] += d * d / double(n);
        }
      }
      detail::tv_grad_fg(p, kMumfordShahTvWeight, &gp);
      break;
    }
    case Regularizer::kNone:
    case Regularizer::kSharedConsistency:
      return 0.0;
  }

  for (size_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (int c = 0; c < C; ++c)
      dot += gp[size_t(c) * n + i] * p[size_t(c) * n + i];
    for (int c = 0; c < C; ++c)
      (*dlogits)[size_t(c) * n + i] +=
          weight * p[size_t(c) * n + i] * (gp[size_t(c) * n + i] - dot);
  }
  return value;
}

}  // namespace branchseg
