// branchseg/network.hpp -- the single-encoder, K-decoder segmentation graph:
// a U-Net-style encoder with skip connections feeding one main decoder and
// K-1 perturbed auxiliary decoders that differ by dilation rate, one extra
// convolution per stage, and stochastic feature dropout.
//
// The model is templated on its scalar so production code runs float while
// gradient tests instantiate double. All parameters live in one flat vector;
// gradients and optimizer moments mirror its layout.
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

#include <Eigen/Dense>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "branchseg/common.hpp"
#include "branchseg/losses.hpp"
#include "branchseg/tensor.hpp"
#include "branchseg/types.hpp"

namespace branchseg {

enum class DropoutMode { kChannel, kElement };

inline DropoutMode dropout_mode_from_string(const std::string& s) {
  if (s == "channel") return DropoutMode::kChannel;
  if (s == "element") return DropoutMode::kElement;
  throw ConfigError("dropout_mode: expected 'channel' or 'element', got '" +
                    s + "'");
}

inline std::string to_string(DropoutMode m) {
  return m == DropoutMode::kChannel ? "channel" : "element";
}

inline std::vector<int> default_dilation_rates(int K) {
  std::vector<int> r;
  for (int d = 0; d < K; ++d) r.push_back(1 << std::min(d, 3));
  return r;
}

struct ArchConfig {
  int n_decoders = 3;
  int depth = 4;
  int base_channels = 16;
  std::vector<int> dilation_rates = {1, 2, 4};
  double aux_dropout_rate = 0.5;
  DropoutMode dropout_mode = DropoutMode::kChannel;
  int n_classes = 2;

  int stage_channels(int s) const { return base_channels << s; }

  void validate() const {
    if (n_decoders < 1) throw ConfigError("arch.n_decoders: must be >= 1");
    if (depth < 1 || depth > 8)
      throw ConfigError("arch.depth: must be in [1,8]");
    if (base_channels < 1) throw ConfigError("arch.base_channels: must be >= 1");
    if (int(dilation_rates.size()) != n_decoders)
      throw ConfigError("arch.dilation_rates: length " +
                        std::to_string(dilation_rates.size()) +
                        " does not match n_decoders=" +
                        std::to_string(n_decoders));
    for (int r : dilation_rates)
      if (r < 1) throw ConfigError("arch.dilation_rates: rates must be >= 1");
    if (aux_dropout_rate < 0.0 || aux_dropout_rate >= 1.0)
      throw ConfigError("arch.aux_dropout_rate: must be in [0,1)");
    if (n_classes < 2) throw ConfigError("arch.n_classes: must be >= 2");
  }
};

inline nlohmann::json arch_to_json(const ArchConfig& a) {
  return {{"n_decoders", a.n_decoders},
          {"depth", a.depth},
          {"base_channels", a.base_channels},
          {"dilation_rates", a.dilation_rates},
          {"aux_dropout_rate", a.aux_dropout_rate},
          {"dropout_mode", to_string(a.dropout_mode)},
          {"n_classes", a.n_classes}};
}

inline ArchConfig arch_from_json(const nlohmann::json& j) {
  ArchConfig a;
  a.n_decoders = j.at("n_decoders").get<int>();
  a.depth = j.at("depth").get<int>();
  a.base_channels = j.at("base_channels").get<int>();
  a.dilation_rates = j.at("dilation_rates").get<std::vector<int>>();
  a.aux_dropout_rate = j.at("aux_dropout_rate").get<double>();
  a.dropout_mode = dropout_mode_from_string(j.at("dropout_mode").get<std::string>());
  a.n_classes = j.at("n_classes").get<int>();
  a.validate();
  return a;
}

// One named slice of the flat parameter vector. Conv weight fans include the
// kernel area; bias blocks carry fan 0 and is_weight=false.
struct ParamBlock {
  std::string name;
  size_t offset = 0;
  size_t count = 0;
  int fan_in = 0;
  int fan_out = 0;
  bool is_weight = false;
};

enum class Mode { kTrain, kEval };

// Per-forward multiplicative dropout masks for the auxiliary decoders, drawn
// up front so a fixed plan makes the train-mode forward a deterministic
// function of (parameters, input). Site order: auxiliary decoders d=1..K-1,
// stages top-down (s = depth-1 .. 0); within a site, channel order (and
// row-major within a channel in element mode).
template <typename Scalar>
struct DropoutPlan {
  std::vector<std::vector<Scalar>> masks;
};

namespace detail {

struct ConvSpec {
  int cin = 0, cout = 0, k = 3, dilation = 1;
  size_t w = 0, b = 0;  // offsets into the flat parameter vector
};

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using ColVec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// Unfold a C x H x W volume into a (C*k*k) x (H*W) matrix for same-padding
// dilated convolution; out-of-frame taps are zero.
template <typename S>
void im2col(const Tensor3<S>& in, int k, int dil, std::vector<S>* cols) {
  const int C = in.channels(), H = in.height(), W = in.width();
  const int pad = dil * (k / 2);
  const size_t hw = size_t(H) * W;
  cols->assign(size_t(C) * k * k * hw, S(0));
  for (int c = 0; c < C; ++c) {
    const S* src = in.channel(c);
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const int dy = dil * ky - pad, dx = dil * kx - pad;
        S* dst = cols->data() + ((size_t(c) * k + ky) * k + kx) * hw;
        for (int r = 0; r < H; ++r) {
          const int sr = r + dy;
          if (sr < 0 || sr >= H) continue;
          const int c0 = std::max(0, -dx), c1 = std::min(W, W - dx);
          if (c1 > c0)
            std::copy(src + size_t(sr) * W + c0 + dx,
                      src + size_t(sr) * W + c1 + dx,
                      dst + size_t(r) * W + c0);
        }
      }
  }
}

// Transpose of im2col: scatter-add a (C*k*k) x (H*W) matrix back into din.
template <typename S>
void col2im_add(const S* cols, int C, int H, int W, int k, int dil,
                Tensor3<S>* din) {
  const int pad = dil * (k / 2);
  const size_t hw = size_t(H) * W;
  for (int c = 0; c < C; ++c) {
    S* dst = din->channel(c);
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const int dy = dil * ky - pad, dx = dil * kx - pad;
        const S* src = cols + ((size_t(c) * k + ky) * k + kx) * hw;
        for (int r = 0; r < H; ++r) {
          const int sr = r + dy;
          if (sr < 0 || sr >= H) continue;
          const int c0 = std::max(0, -dx), c1 = std::min(W, W - dx);
          for (int cc = c0; cc < c1; ++cc)
            dst[size_t(sr) * W + cc + dx] += src[size_t(r) * W + cc];
        }
      }
  }
}

template <typename S>
std::vector<S>& conv_scratch() {
  static thread_local std::vector<S> buf;
  return buf;
}

template <typename S>
std::vector<S>& conv_scratch2() {
  static thread_local std::vector<S> buf;
  return buf;
}

template <typename S>
void conv_forward(const ConvSpec& L, const S* p, const Tensor3<S>& in,
                  Tensor3<S>* out, bool relu) {
  const int H = in.height(), W = in.width();
  const size_t hw = size_t(H) * W;
  *out = Tensor3<S>(L.cout, H, W);

  const S* cols_data = in.data();
  if (L.k != 1) {
    auto& cols = conv_scratch<S>();
    im2col(in, L.k, L.dilation, &cols);
    cols_data = cols.data();
  }
  const int kk = L.cin * L.k * L.k;
  Eigen::Map<const RowMat<S>> Wm(p + L.w, L.cout, kk);
  Eigen::Map<const RowMat<S>> Cm(cols_data, kk, long(hw));
  Eigen::Map<RowMat<S>> Om(out->data(), L.cout, long(hw));
  Om.noalias() = Wm * Cm;
  Eigen::Map<const ColVec<S>> bv(p + L.b, L.cout);
  Om.colwise() += bv;
  if (relu)
    for (size_t i = 0; i < out->size(); ++i)
      if ((*out)[i] < S(0)) (*out)[i] = S(0);
}

// dout is consumed (ReLU-masked in place); din, when non-null, is assigned
// the input gradient; parameter gradients accumulate into dp.
template <typename S>
void conv_backward(const ConvSpec& L, const S* p, const Tensor3<S>& in,
                   const Tensor3<S>& out, bool relu, Tensor3<S>* dout,
                   Tensor3<S>* din, S* dp) {
  const int H = in.height(), W = in.width();
  const size_t hw = size_t(H) * W;
  if (relu)
    for (size_t i = 0; i < out.size(); ++i)
      if (out[i] <= S(0)) (*dout)[i] = S(0);

  const S* cols_data = in.data();
  if (L.k != 1) {
    auto& cols = conv_scratch<S>();
    im2col(in, L.k, L.dilation, &cols);
    cols_data = cols.data();
  }
  const int kk = L.cin * L.k * L.k;
  Eigen::Map<const RowMat<S>> Cm(cols_data, kk, long(hw));
  Eigen::Map<const RowMat<S>> Dm(dout->data(), L.cout, long(hw));
  Eigen::Map<RowMat<S>> dWm(dp + L.w, L.cout, kk);
  dWm.noalias() += Dm * Cm.transpose();
  // Bias grads in fixed scan order. An Eigen row reduction peels to the
  // buffer's runtime alignment, which would reorder float sums run to run.
  for (int co = 0; co < L.cout; ++co) {
    S acc{};
    const S* row = dout->data() + size_t(co) * hw;
    for (size_t i = 0; i < hw; ++i) acc += row[i];
    dp[L.b + co] += acc;
  }

  if (!din) return;
  *din = Tensor3<S>(L.cin, H, W, S(0));
  Eigen::Map<const RowMat<S>> Wm(p + L.w, L.cout, kk);
  if (L.k == 1) {
    Eigen::Map<RowMat<S>> dIm(din->data(), kk, long(hw));
    dIm.noalias() = Wm.transpose() * Dm;
  } else {
    auto& dcols = conv_scratch2<S>();
    dcols.resize(size_t(kk) * hw);
    Eigen::Map<RowMat<S>> dCm(dcols.data(), kk, long(hw));
    dCm.noalias() = Wm.transpose() * Dm;
    col2im_add(dcols.data(), L.cin, H, W, L.k, L.dilation, din);
  }
}

// 2x2 max pooling, stride 2. Ties resolve to the first element in scan
// order, recorded as absolute indices for the backward scatter.
template <typename S>
void maxpool2(const Tensor3<S>& in, Tensor3<S>* out,
              std::vector<uint32_t>* idx) {
  const int C = in.channels(), H = in.height(), W = in.width();
  const int Ho = H / 2, Wo = W / 2;
  *out = Tensor3<S>(C, Ho, Wo);
  idx->assign(size_t(C) * Ho * Wo, 0);
  for (int c = 0; c < C; ++c) {
    const S* src = in.channel(c);
    S* dst = out->channel(c);
    for (int r = 0; r < Ho; ++r)
      for (int cc = 0; cc < Wo; ++cc) {
        size_t best = size_t(2 * r) * W + 2 * cc;
        S bv = src[best];
        const size_t cand[3] = {best + 1, best + W, best + W + 1};
        for (size_t k : cand)
          if (src[k] > bv) {
            bv = src[k];
            best = k;
          }
        dst[size_t(r) * Wo + cc] = bv;
        (*idx)[(size_t(c) * Ho + r) * Wo + cc] =
            uint32_t(size_t(c) * H * W + best);
      }
  }
}

template <typename S>
void maxpool2_backward(const std::vector<uint32_t>& idx, const Tensor3<S>& dout,
                       int H, int W, Tensor3<S>* din) {
  *din = Tensor3<S>(dout.channels(), H, W, S(0));
  for (size_t i = 0; i < dout.size(); ++i) (*din)[idx[i]] += dout[i];
}

template <typename S>
void upsample2(const Tensor3<S>& in, Tensor3<S>* out) {
  const int C = in.channels(), H = in.height(), W = in.width();
  *out = Tensor3<S>(C, 2 * H, 2 * W);
  for (int c = 0; c < C; ++c) {
    const S* src = in.channel(c);
    S* dst = out->channel(c);
    for (int r = 0; r < H; ++r)
      for (int cc = 0; cc < W; ++cc) {
        const S v = src[size_t(r) * W + cc];
        S* d = dst + size_t(2 * r) * 2 * W + 2 * cc;
        d[0] = v;
        d[1] = v;
        d[2 * W] = v;
        d[2 * W + 1] = v;
      }
  }
}

template <typename S>
void upsample2_backward(const Tensor3<S>& dout, Tensor3<S>* din) {
  const int C = dout.channels(), Ho = dout.height(), Wo = dout.width();
  const int H = Ho / 2, W = Wo / 2;
  *din = Tensor3<S>(C, H, W);
  for (int c = 0; c < C; ++c) {
    const S* src = dout.channel(c);
    S* dst = din->channel(c);
    for (int r = 0; r < H; ++r)
      for (int cc = 0; cc < W; ++cc) {
        const S* s = src + size_t(2 * r) * Wo + 2 * cc;
        dst[size_t(r) * W + cc] = s[0] + s[1] + s[Wo] + s[Wo + 1];
      }
  }
}

// concat = [a ; b] along channels, a first.
template <typename S>
void concat2(const Tensor3<S>& a, const Tensor3<S>& b, Tensor3<S>* out) {
  *out = Tensor3<S>(a.channels() + b.channels(), a.height(), a.width());
  std::copy(a.data(), a.data() + a.size(), out->data());
  std::copy(b.data(), b.data() + b.size(), out->data() + a.size());
}

}  // namespace detail

// Activation record of one forward pass, consumed by backward().
template <typename Scalar>
struct Tape {
  Tensor3<Scalar> input;
  std::vector<Tensor3<Scalar>> enc_a, skips, pooled;
  std::vector<std::vector<uint32_t>> pool_idx;
  Tensor3<Scalar> bot_a, bot_b;

  struct DecStage {
    Tensor3<Scalar> upsampled, up_out, concat, a_out, b_out, extra_out;
    std::vector<Scalar> drop_mask;  // empty when no dropout was applied
    Tensor3<Scalar> stage_out;
  };
  std::vector<std::vector<DecStage>> dec;  // [decoder][stage]
};

template <typename Scalar>
class Model {
 public:
  explicit Model(const ArchConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    build();
    params_.assign(n_params_, Scalar(0));
  }

  const ArchConfig& config() const { return cfg_; }
  std::vector<Scalar>& params() { return params_; }
  const std::vector<Scalar>& params() const { return params_; }
  size_t n_params() const { return n_params_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }

  // Glorot-normal weights (std = sqrt(2/(fan_in+fan_out))), zero biases.
  void init_params(uint64_t seed) {
    RandomStream rng(seed, "init");
    for (const auto& blk : blocks_) {
      if (!blk.is_weight) {
        std::fill_n(params_.begin() + long(blk.offset), blk.count, Scalar(0));
        continue;
      }
      const double sd = std::sqrt(2.0 / (blk.fan_in + blk.fan_out));
      for (size_t i = 0; i < blk.count; ++i)
        params_[blk.offset + i] = Scalar(rng.normal(0.0, sd));
    }
  }

  DropoutPlan<Scalar> draw_dropout_plan(int H, int W, RandomStream* rng) const {
    DropoutPlan<Scalar> plan;
    const double rate = cfg_.aux_dropout_rate;
    const Scalar keep_scale =
        rate > 0.0 ? Scalar(1.0 / (1.0 - rate)) : Scalar(1);
    for (int d = 1; d < cfg_.n_decoders; ++d)
      for (int s = cfg_.depth - 1; s >= 0; --s) {
        const int ch = cfg_.stage_channels(s);
        const size_t n =
            cfg_.dropout_mode == DropoutMode::kChannel
                ? size_t(ch)
                : size_t(ch) * (size_t(H) >> s) * (size_t(W) >> s);
        std::vector<Scalar> m(n);
        for (size_t i = 0; i < n; ++i)
          m[i] = rng->bernoulli(1.0 - rate) ? keep_scale : Scalar(0);
        plan.masks.push_back(std::move(m));
      }
    return plan;
  }

  // One image through the encoder and the requested decoders, returning raw
  // logits per decoder. In train mode a DropoutPlan perturbs the auxiliary
  // branches; the main decoder never sees dropout. `only_decoder` >= 0
  // restricts computation to that branch (the others come back empty).
  std::vector<Tensor3<Scalar>> forward_logits(const Image& img, Mode mode,
                                              const DropoutPlan<Scalar>* plan,
                                              Tape<Scalar>* tape,
                                              int only_decoder = -1) const {
    const int H = img.height(), W = img.width();
    const int div = 1 << cfg_.depth;
    if (H % div != 0 || W % div != 0)
      throw ShapeError("forward: input " + std::to_string(H) + "x" +
                       std::to_string(W) + " not divisible by 2^depth=" +
                       std::to_string(div));
    Tape<Scalar> local;
    Tape<Scalar>& t = tape ? *tape : local;
    t.enc_a.resize(size_t(cfg_.depth));
    t.skips.resize(size_t(cfg_.depth));
    t.pooled.resize(size_t(cfg_.depth));
    t.pool_idx.resize(size_t(cfg_.depth));
    t.dec.assign(size_t(cfg_.n_decoders), {});

    t.input = Tensor3<Scalar>(1, H, W);
    for (size_t i = 0; i < img.size(); ++i) t.input[i] = Scalar(img[i]);

    const Scalar* p = params_.data();
    const Tensor3<Scalar>* x = &t.input;
    for (int s = 0; s < cfg_.depth; ++s) {
      detail::conv_forward(enc_a_[size_t(s)], p, *x, &t.enc_a[size_t(s)], true);
      detail::conv_forward(enc_b_[size_t(s)], p, t.enc_a[size_t(s)],
                           &t.skips[size_t(s)], true);
      detail::maxpool2(t.skips[size_t(s)], &t.pooled[size_t(s)],
                       &t.pool_idx[size_t(s)]);
      x = &t.pooled[size_t(s)];
    }
    detail::conv_forward(bot_a_, p, *x, &t.bot_a, true);
    detail::conv_forward(bot_b_, p, t.bot_a, &t.bot_b, true);

    std::vector<Tensor3<Scalar>> logits(size_t(cfg_.n_decoders));
    for (int d = 0; d < cfg_.n_decoders; ++d) {
      if (only_decoder >= 0 && d != only_decoder) continue;
      auto& stages = t.dec[size_t(d)];
      stages.resize(size_t(cfg_.depth));
      const Tensor3<Scalar>* cur = &t.bot_b;
      for (int s = cfg_.depth - 1; s >= 0; --s) {
        auto& st = stages[size_t(s)];
        detail::upsample2(*cur, &st.upsampled);
        detail::conv_forward(up_[size_t(d)][size_t(s)], p, st.upsampled,
                             &st.up_out, true);
        detail::concat2(st.up_out, t.skips[size_t(s)], &st.concat);
        detail::conv_forward(dca_[size_t(d)][size_t(s)], p, st.concat,
                             &st.a_out, true);
        detail::conv_forward(dcb_[size_t(d)][size_t(s)], p, st.a_out,
                             &st.b_out, true);
        const Tensor3<Scalar>* pre = &st.b_out;
        if (d > 0) {
          detail::conv_forward(extra_[size_t(d)][size_t(s)], p, st.b_out,
                               &st.extra_out, true);
          pre = &st.extra_out;
        }
        if (mode == Mode::kTrain && d > 0 && plan) {
          st.drop_mask = plan->masks[site_index(d, s)];
          st.stage_out = *pre;
          apply_mask(st.drop_mask, &st.stage_out);
        } else {
          st.stage_out = *pre;
        }
        cur = &st.stage_out;
      }
      detail::conv_forward(head_[size_t(d)], p, *cur, &logits[size_t(d)],
                           false);
    }
    return logits;
  }

  // Softmax probability maps per decoder (the forward contract).
  std::vector<ProbMap> forward(const Image& img, Mode mode,
                               RandomStream* rng) const {
    DropoutPlan<Scalar> plan;
    const DropoutPlan<Scalar>* pp = nullptr;
    if (mode == Mode::kTrain) {
      plan = draw_dropout_plan(img.height(), img.width(), rng);
      pp = &plan;
    }
    auto logits = forward_logits(img, mode, pp, nullptr);
    std::vector<ProbMap> probs;
    probs.reserve(logits.size());
    for (const auto& z : logits) probs.push_back(softmax(to_double(z)));
    return probs;
  }

  // Argmax of the main decoder's probabilities; ties break to background.
  FullMask segment(const Image& img) const {
    auto logits = forward_logits(img, Mode::kEval, nullptr, nullptr, 0);
    const ProbMap prob = softmax(to_double(logits[0]));
    const size_t n = prob.plane();
    FullMask mask(prob.height(), prob.width());
    for (size_t i = 0; i < n; ++i) {
      int best = 0;
      double bv = prob[i];
      for (int c = 1; c < prob.channels(); ++c)
        if (prob[size_t(c) * n + i] > bv) {
          bv = prob[size_t(c) * n + i];
          best = c;
        }
      mask[i] = uint8_t(best);
    }
    return mask;
  }

  // Reverse pass over a recorded tape; dparams accumulates (same layout as
  // params). dlogits must hold one gradient map per decoder.
  void backward(const Tape<Scalar>& t,
                const std::vector<Tensor3<Scalar>>& dlogits,
                std::vector<Scalar>* dparams) const {
    if (dlogits.size() != size_t(cfg_.n_decoders))
      throw ShapeError("backward: expected " +
                       std::to_string(cfg_.n_decoders) + " gradient maps");
    const Scalar* p = params_.data();
    Scalar* dp = dparams->data();

    Tensor3<Scalar> d_bot(t.bot_b.channels(), t.bot_b.height(),
                          t.bot_b.width(), Scalar(0));
    std::vector<Tensor3<Scalar>> d_skips(size_t(cfg_.depth));
    for (int s = 0; s < cfg_.depth; ++s)
      d_skips[size_t(s)] = Tensor3<Scalar>(t.skips[size_t(s)].channels(),
                                           t.skips[size_t(s)].height(),
                                           t.skips[size_t(s)].width(), Scalar(0));

    for (int d = 0; d < cfg_.n_decoders; ++d) {
      const auto& stages = t.dec[size_t(d)];
      Tensor3<Scalar> d_stage;
      {
        Tensor3<Scalar> dl = dlogits[size_t(d)];
        detail::conv_backward(head_[size_t(d)], p, stages[0].stage_out,
                              stages[0].stage_out, false, &dl, &d_stage, dp);
      }
      for (int s = 0; s < cfg_.depth; ++s) {
        const auto& st = stages[size_t(s)];
        if (!st.drop_mask.empty()) apply_mask(st.drop_mask, &d_stage);
        Tensor3<Scalar> d_b;
        if (d > 0) {
          detail::conv_backward(extra_[size_t(d)][size_t(s)], p, st.b_out,
                                st.extra_out, true, &d_stage, &d_b, dp);
        } else {
          d_b = std::move(d_stage);
        }
        Tensor3<Scalar> d_a;
        detail::conv_backward(dcb_[size_t(d)][size_t(s)], p, st.a_out,
                              st.b_out, true, &d_b, &d_a, dp);
        Tensor3<Scalar> d_concat;
        detail::conv_backward(dca_[size_t(d)][size_t(s)], p, st.concat,
                              st.a_out, true, &d_a, &d_concat, dp);
        const int ch = cfg_.stage_channels(s);
        Tensor3<Scalar> d_up_out(ch, d_concat.height(), d_concat.width());
        std::copy(d_concat.data(), d_concat.data() + d_up_out.size(),
                  d_up_out.data());
        {
          auto& dsk = d_skips[size_t(s)];
          const Scalar* src = d_concat.data() + d_up_out.size();
          for (size_t i = 0; i < dsk.size(); ++i) dsk[i] += src[i];
        }
        Tensor3<Scalar> d_upsampled;
        detail::conv_backward(up_[size_t(d)][size_t(s)], p, st.upsampled,
                              st.up_out, true, &d_up_out, &d_upsampled, dp);
        Tensor3<Scalar> d_next;
        detail::upsample2_backward(d_upsampled, &d_next);
        if (s + 1 == cfg_.depth) {
          for (size_t i = 0; i < d_bot.size(); ++i) d_bot[i] += d_next[i];
        } else {
          d_stage = std::move(d_next);
        }
      }
    }

    Tensor3<Scalar> d_a, d_pooled;
    detail::conv_backward(bot_b_, p, t.bot_a, t.bot_b, true, &d_bot, &d_a, dp);
    detail::conv_backward(bot_a_, p, t.pooled[size_t(cfg_.depth - 1)], t.bot_a,
                          true, &d_a, &d_pooled, dp);
    for (int s = cfg_.depth - 1; s >= 0; --s) {
      Tensor3<Scalar> d_skip;
      detail::maxpool2_backward(t.pool_idx[size_t(s)], d_pooled,
                                t.skips[size_t(s)].height(),
                                t.skips[size_t(s)].width(), &d_skip);
      for (size_t i = 0; i < d_skip.size(); ++i)
        d_skip[i] += d_skips[size_t(s)][i];
      Tensor3<Scalar> d_enca;
      detail::conv_backward(enc_b_[size_t(s)], p, t.enc_a[size_t(s)],
                            t.skips[size_t(s)], true, &d_skip, &d_enca, dp);
      const Tensor3<Scalar>& in =
          s > 0 ? t.pooled[size_t(s - 1)] : t.input;
      Tensor3<Scalar>* din = s > 0 ? &d_pooled : nullptr;
      Tensor3<Scalar> d_in;
      detail::conv_backward(enc_a_[size_t(s)], p, in, t.enc_a[size_t(s)], true,
                            &d_enca, din ? &d_in : nullptr, dp);
      if (din) d_pooled = std::move(d_in);
    }
  }

  static Tensor3<double> to_double(const Tensor3<Scalar>& a) {
    Tensor3<double> out(a.channels(), a.height(), a.width());
    for (size_t i = 0; i < a.size(); ++i) out[i] = double(a[i]);
    return out;
  }

 private:
  size_t site_index(int d, int s) const {
    return size_t(d - 1) * cfg_.depth + size_t(cfg_.depth - 1 - s);
  }

  void apply_mask(const std::vector<Scalar>& mask, Tensor3<Scalar>* x) const {
    if (cfg_.dropout_mode == DropoutMode::kChannel) {
      for (int c = 0; c < x->channels(); ++c) {
        Scalar* ch = x->channel(c);
        const Scalar m = mask[size_t(c)];
        for (size_t i = 0; i < x->plane(); ++i) ch[i] *= m;
      }
    } else {
      for (size_t i = 0; i < x->size(); ++i) (*x)[i] *= mask[i];
    }
  }

  detail::ConvSpec register_conv(const std::string& name, int cin, int cout,
                                 int k, int dilation) {
    detail::ConvSpec c;
    c.cin = cin;
    c.cout = cout;
    c.k = k;
    c.dilation = dilation;
    c.w = n_params_;
    blocks_.push_back({name + ".w", n_params_, size_t(cout) * cin * k * k,
                       cin * k * k, cout * k * k, true});
    n_params_ += size_t(cout) * cin * k * k;
    c.b = n_params_;
    blocks_.push_back({name + ".b", n_params_, size_t(cout), 0, 0, false});
    n_params_ += size_t(cout);
    return c;
  }

  void build() {
    const int D = cfg_.depth;
    for (int s = 0; s < D; ++s) {
      const int cin = s == 0 ? 1 : cfg_.stage_channels(s - 1);
      const int ch = cfg_.stage_channels(s);
      const std::string tag = "enc" + std::to_string(s);
      enc_a_.push_back(register_conv(tag + "a", cin, ch, 3, 1));
      enc_b_.push_back(register_conv(tag + "b", ch, ch, 3, 1));
    }
    const int cb = cfg_.stage_channels(D);
    bot_a_ = register_conv("bota", cfg_.stage_channels(D - 1), cb, 3, 1);
    bot_b_ = register_conv("botb", cb, cb, 3, 1);

    up_.resize(size_t(cfg_.n_decoders));
    dca_.resize(size_t(cfg_.n_decoders));
    dcb_.resize(size_t(cfg_.n_decoders));
    extra_.resize(size_t(cfg_.n_decoders));
    for (int d = 0; d < cfg_.n_decoders; ++d) {
      const int dil = cfg_.dilation_rates[size_t(d)];
      up_[size_t(d)].resize(size_t(D));
      dca_[size_t(d)].resize(size_t(D));
      dcb_[size_t(d)].resize(size_t(D));
      extra_[size_t(d)].resize(size_t(D));
      for (int s = D - 1; s >= 0; --s) {
        const int ch = cfg_.stage_channels(s);
        const int above = cfg_.stage_channels(s + 1);
        const std::string tag =
            "dec" + std::to_string(d) + "s" + std::to_string(s);
        up_[size_t(d)][size_t(s)] =
            register_conv(tag + "up", above, ch, 3, dil);
        dca_[size_t(d)][size_t(s)] =
            register_conv(tag + "a", 2 * ch, ch, 3, dil);
        dcb_[size_t(d)][size_t(s)] = register_conv(tag + "b", ch, ch, 3, dil);
        if (d > 0)
          extra_[size_t(d)][size_t(s)] =
              register_conv(tag + "x", ch, ch, 3, dil);
      }
      head_.push_back(register_conv("dec" + std::to_string(d) + "head",
                                    cfg_.stage_channels(0), cfg_.n_classes, 1,
                                    1));
    }
  }

  ArchConfig cfg_;
  size_t n_params_ = 0;
  std::vector<Scalar> params_;
  std::vector<ParamBlock> blocks_;

  std::vector<detail::ConvSpec> enc_a_, enc_b_;
  detail::ConvSpec bot_a_, bot_b_;
  std::vector<std::vector<detail::ConvSpec>> up_, dca_, dcb_, extra_;
  std::vector<detail::ConvSpec> head_;
};

// ---------------------------------------------------------------------------
// Checkpoints: binary parameter blob + JSON manifest (the portable contract)
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  uint64_t seed = 0;
  int epoch = 0;
  double val_miou = 0.0;
};

inline constexpr char kCheckpointMagic[8] = {'B', 'S', 'E', 'G',
                                             'C', 'K', 'P', '1'};

template <typename Scalar>
void save_checkpoint(const Model<Scalar>& model, const std::string& dir,
                     const CheckpointMeta& meta) {
  {
    std::ofstream f(dir + "/checkpoint.bin", std::ios::binary);
    if (!f) throw DataError("cannot write " + dir + "/checkpoint.bin");
    f.write(kCheckpointMagic, 8);
    const uint32_t elem = sizeof(Scalar);
    const uint64_t count = model.n_params();
    f.write(reinterpret_cast<const char*>(&elem), sizeof elem);
    f.write(reinterpret_cast<const char*>(&count), sizeof count);
    f.write(reinterpret_cast<const char*>(model.params().data()),
            std::streamsize(count * sizeof(Scalar)));
  }
  nlohmann::json manifest = {
      {"arch", arch_to_json(model.config())},
      {"seed", meta.seed},
      {"epoch", meta.epoch},
      {"val_miou", meta.val_miou},
      {"dtype", sizeof(Scalar) == 4 ? "float32" : "float64"},
      {"params", model.n_params()}};
  std::ofstream f(dir + "/checkpoint.json");
  if (!f) throw DataError("cannot write " + dir + "/checkpoint.json");
  f << manifest.dump(2) << "\n";
}

template <typename Scalar>
Model<Scalar> load_checkpoint(const std::string& dir,
                              CheckpointMeta* meta = nullptr) {
  std::ifstream mf(dir + "/checkpoint.json");
  if (!mf) throw DataError("missing checkpoint manifest " + dir +
                           "/checkpoint.json");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  Model<Scalar> model(arch_from_json(manifest.at("arch")));
  if (meta) {
    meta->seed = manifest.at("seed").get<uint64_t>();
    meta->epoch = manifest.at("epoch").get<int>();
    meta->val_miou = manifest.at("val_miou").get<double>();
  }

  std::ifstream f(dir + "/checkpoint.bin", std::ios::binary);
  if (!f) throw DataError("missing checkpoint blob " + dir + "/checkpoint.bin");
  char magic[8];
  uint32_t elem = 0;
  uint64_t count = 0;
  f.read(magic, 8);
  f.read(reinterpret_cast<char*>(&elem), sizeof elem);
  f.read(reinterpret_cast<char*>(&count), sizeof count);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw DataError("bad checkpoint header in " + dir + "/checkpoint.bin");
  if (count != model.n_params())
    throw DataError("checkpoint parameter count " + std::to_string(count) +
                    " does not match architecture (" +
                    std::to_string(model.n_params()) + ")");
  if (elem == sizeof(Scalar)) {
    f.read(reinterpret_cast<char*>(model.params().data()),
           std::streamsize(count * sizeof(Scalar)));
  } else if (elem == 4) {
    std::vector<float> tmp(count);
    f.read(reinterpret_cast<char*>(tmp.data()),
           std::streamsize(count * sizeof(float)));
    for (size_t i = 0; i < count; ++i) model.params()[i] = Scalar(tmp[i]);
  } else if (elem == 8) {
    std::vector<double> tmp(count);
    f.read(reinterpret_cast<char*>(tmp.data()),
           std::streamsize(count * sizeof(double)));
    for (size_t i = 0; i < count; ++i) model.params()[i] = Scalar(tmp[i]);
  } else {
    throw DataError("unsupported checkpoint element size " +
                    std::to_string(elem));
  }
  if (!f) throw DataError("truncated checkpoint blob in " + dir);
  return model;
}

}  // namespace branchseg
