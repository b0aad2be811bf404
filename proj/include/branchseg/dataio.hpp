// branchseg/dataio.hpp -- dataset directory IO, paired augmentation,
// normalization, deterministic splits, batch streams.
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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "branchseg/common.hpp"
#include "branchseg/png_io.hpp"
#include "branchseg/types.hpp"

namespace branchseg {

struct Sample {
  Image image;
  AnnotationMap annotation;
  std::optional<FullMask> full_mask;  // absent for purely weak data
  std::string id;
};

struct AugmentConfig {
  bool enabled = true;
  double zoom_range = 0.2;       // scale drawn from [1-z, 1+z]
  double translation_range = 0.2;  // shift up to +-range * side
  double shear_max_deg = 45.0;
  double rotation_max_deg = 45.0;
  double flip_prob = 0.5;        // horizontal flip

  void validate() const {
    if (zoom_range < 0.0 || zoom_range >= 1.0)
      throw ConfigError("augment.zoom_range: must be in [0,1)");
    if (translation_range < 0.0)
      throw ConfigError("augment.translation_range: must be >= 0");
    if (shear_max_deg < 0.0)
      throw ConfigError("augment.shear_max_deg: must be >= 0");
    if (rotation_max_deg < 0.0)
      throw ConfigError("augment.rotation_max_deg: must be >= 0");
    if (flip_prob < 0.0 || flip_prob > 1.0)
      throw ConfigError("augment.flip_prob: must be in [0,1]");
  }
};

struct SplitRatios {
  double train_val = 0.8;
  double test = 0.2;
  double val_of_trainval = 0.1;
};

struct SplitDescriptor {
  std::vector<std::string> train, val, test;
};

// ---------------------------------------------------------------------------
// Dataset directory contract:
//   images/<id>.png    8-bit grayscale
//   masks/<id>.png     0=background, 255=foreground            (optional dir)
//   scribbles/<id>.png 0=background, 255=foreground, 127=unlabeled (optional)
//   split.json         {"train": [...], "val": [...], "test": [...]}
// When an optional directory exists, every id must resolve inside it.
// ---------------------------------------------------------------------------

struct Dataset {
  std::vector<Sample> samples;  // in split order: train, then val, then test
  SplitDescriptor split;

  std::vector<const Sample*> subset(const std::vector<std::string>& ids) const {
    std::vector<const Sample*> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
      auto it = std::find_if(samples.begin(), samples.end(),
                             [&](const Sample& s) { return s.id == id; });
      if (it == samples.end())
        throw DataError("dataset: id '" + id + "' missing from samples");
      out.push_back(&*it);
    }
    return out;
  }
};

namespace detail {

inline AnnotationMap decode_label_png(const Tensor2<uint8_t>& raw,
                                      const std::string& path,
                                      bool allow_unlabeled) {
  AnnotationMap out(raw.height(), raw.width());
  for (size_t i = 0; i < raw.size(); ++i) {
    switch (raw[i]) {
      case kPngBackground: out[i] = kBackground; break;
      case kPngForeground: out[i] = kForeground; break;
      case kPngUnlabeled:
        if (allow_unlabeled) {
          out[i] = kUnlabeled;
          break;
        }
        [[fallthrough]];
      default:
        throw DataError("unknown label value " + std::to_string(int(raw[i])) +
                        " in " + path);
    }
  }
  return out;
}

inline Tensor2<uint8_t> encode_label_png(const Tensor2<uint8_t>& labels) {
  Tensor2<uint8_t> raw(labels.height(), labels.width());
  for (size_t i = 0; i < labels.size(); ++i)
    raw[i] = labels[i] == kForeground
                 ? kPngForeground
                 : (labels[i] == kUnlabeled ? kPngUnlabeled : kPngBackground);
  return raw;
}

}  // namespace detail

inline void save_split(const std::filesystem::path& dir,
                       const SplitDescriptor& split) {
  nlohmann::json j;
  j["train"] = split.train;
  j["val"] = split.val;
  j["test"] = split.test;
  std::ofstream f(dir / "split.json");
  if (!f) throw DataError("cannot write " + (dir / "split.json").string());
  f << j.dump(2) << "\n";
}

inline void save_image_png(const std::filesystem::path& path,
                           const Image& img) {
  Tensor2<uint8_t> raw(img.height(), img.width());
  for (size_t i = 0; i < img.size(); ++i)
    raw[i] = uint8_t(std::lround(std::clamp(img[i], 0.0f, 1.0f) * 255.0f));
  write_png_gray8(path.string(), raw);
}

inline void save_mask_png(const std::filesystem::path& path,
                          const FullMask& mask) {
  write_png_gray8(path.string(), detail::encode_label_png(mask));
}

// Writes images/ and masks/ for generated pairs plus split.json. Scribbles
// are produced separately (see make_scribbles / the `scribble` command).
inline void save_dataset(const std::filesystem::path& dir,
                         const std::vector<std::pair<Image, FullMask>>& pairs,
                         const SplitDescriptor& split) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  char name[32];
  for (size_t i = 0; i < pairs.size(); ++i) {
    std::snprintf(name, sizeof(name), "%06zu", i);
    save_image_png(dir / "images" / (std::string(name) + ".png"),
                   pairs[i].first);
    save_mask_png(dir / "masks" / (std::string(name) + ".png"),
                  pairs[i].second);
  }
  save_split(dir, split);
}

inline SplitDescriptor load_split(const std::filesystem::path& dir) {
  const auto path = dir / "split.json";
  std::ifstream f(path);
  if (!f) throw DataError("missing " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed " + path.string() + ": " + e.what());
  }
  SplitDescriptor split;
  for (const char* key : {"train", "val", "test"}) {
    if (!j.contains(key))
      throw DataError(path.string() + ": missing key '" + key + "'");
    for (const auto& id : j.at(key))
      (key == std::string("train")
           ? split.train
           : key == std::string("val") ? split.val : split.test)
          .push_back(id.get<std::string>());
  }
  return split;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir / "images"))
    throw DataError("missing directory " + (dir / "images").string());
  const bool have_masks = fs::exists(dir / "masks");
  const bool have_scribbles = fs::exists(dir / "scribbles");

  Dataset ds;
  ds.split = load_split(dir);
  std::vector<std::string> all_ids;
  for (const auto* part : {&ds.split.train, &ds.split.val, &ds.split.test})
    all_ids.insert(all_ids.end(), part->begin(), part->end());

  for (const auto& id : all_ids) {
    Sample s;
    s.id = id;
    const auto img_path = dir / "images" / (id + ".png");
    if (!fs::exists(img_path))
      throw DataError("missing file " + img_path.string());
    const auto raw = read_png_gray8(img_path.string());
    s.image = Image(raw.height(), raw.width());
    for (size_t i = 0; i < raw.size(); ++i) s.image[i] = raw[i] / 255.0f;

    if (have_scribbles) {
      const auto ann_path = dir / "scribbles" / (id + ".png");
      if (!fs::exists(ann_path))
        throw DataError("missing file " + ann_path.string());
      s.annotation = detail::decode_label_png(read_png_gray8(ann_path.string()),
                                              ann_path.string(), true);
    } else {
      s.annotation =
          AnnotationMap(s.image.height(), s.image.width(), kUnlabeled);
    }
    if (have_masks) {
      const auto mask_path = dir / "masks" / (id + ".png");
      if (!fs::exists(mask_path))
        throw DataError("missing file " + mask_path.string());
      s.full_mask = detail::decode_label_png(read_png_gray8(mask_path.string()),
                                             mask_path.string(), false);
    }
    const bool ann_ok = s.image.height() == s.annotation.height() &&
                        s.image.width() == s.annotation.width();
    const bool mask_ok = !s.full_mask ||
                         (s.image.height() == s.full_mask->height() &&
                          s.image.width() == s.full_mask->width());
    if (!ann_ok || !mask_ok)
      throw DataError("sample '" + id + "': image/label shape mismatch");
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Normalization and augmentation
// ---------------------------------------------------------------------------

// Per-image min-max scaling to [0,1]; constant images map to all-zeros.
inline Image normalize(const Image& img) {
  if (img.size() == 0) return img;
  float lo = img[0], hi = img[0];
  for (size_t i = 1; i < img.size(); ++i) {
    lo = std::min(lo, img[i]);
    hi = std::max(hi, img[i]);
  }
  Image out(img.height(), img.width());
  if (hi > lo) {
    const float inv = 1.0f / (hi - lo);
    for (size_t i = 0; i < img.size(); ++i) out[i] = (img[i] - lo) * inv;
  }
  return out;
}

struct AffineParams {
  double zoom = 1.0;
  double tx = 0.0, ty = 0.0;   // pixels
  double shear_rad = 0.0;
  double rot_rad = 0.0;
  bool flip_h = false;
};

// Draw order is fixed (zoom, tx, ty, shear, rotation, flip) so a stream
// advances identically for every config.
inline AffineParams sample_augment_params(const AugmentConfig& cfg, int height,
                                          int width, RandomStream* rng) {
  constexpr double kDegToRad = 0.017453292519943295;
  AffineParams p;
  p.zoom = rng->uniform(1.0 - cfg.zoom_range, 1.0 + cfg.zoom_range);
  p.tx = rng->uniform(-cfg.translation_range, cfg.translation_range) * width;
  p.ty = rng->uniform(-cfg.translation_range, cfg.translation_range) * height;
  p.shear_rad = rng->uniform(-cfg.shear_max_deg, cfg.shear_max_deg) * kDegToRad;
  p.rot_rad =
      rng->uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg) * kDegToRad;
  p.flip_h = rng->bernoulli(cfg.flip_prob);
  return p;
}

// Maps an output pixel center back to source coordinates (inverse warp).
// Forward model, about the image center: flip, scale, x-shear, rotate, then
// translate.
inline void affine_source_point(const AffineParams& p, int height, int width,
                                double out_x, double out_y, double* src_x,
                                double* src_y) {
  const double cx = (width - 1) * 0.5, cy = (height - 1) * 0.5;
  // Forward 2x2: R(rot) * Shear(k) * Scale(z) * Flip
  const double cr = std::cos(p.rot_rad), sr = std::sin(p.rot_rad);
  const double k = std::tan(p.shear_rad);
  const double fx = p.flip_h ? -1.0 : 1.0;
  const double a = cr * p.zoom * fx + (-sr) * 0.0;  // d(out_x)/d(src_x)
  const double b = cr * p.zoom * k - sr * p.zoom;   // d(out_x)/d(src_y)
  const double c = sr * p.zoom * fx;
  const double d = sr * p.zoom * k + cr * p.zoom;
  const double det = a * d - b * c;
  // zoom >= 1 - zoom_range > 0 keeps the transform invertible
  const double ia = d / det, ib = -b / det, ic = -c / det, id = a / det;
  const double vx = out_x - cx - p.tx, vy = out_y - cy - p.ty;
  *src_x = ia * vx + ib * vy + cx;
  *src_y = ic * vx + id * vy + cy;
}

namespace detail {

inline Image warp_bilinear(const Image& img, const AffineParams& p) {
  const int H = img.height(), W = img.width();
  Image out(H, W, 0.0f);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      double sx, sy;
      affine_source_point(p, H, W, c, r, &sx, &sy);
      const int x0 = int(std::floor(sx)), y0 = int(std::floor(sy));
      const double ax = sx - x0, ay = sy - y0;
      double acc = 0.0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const int xx = x0 + dx, yy = y0 + dy;
          if (xx < 0 || xx >= W || yy < 0 || yy >= H) continue;  // zero fill
          const double wgt = (dx ? ax : 1.0 - ax) * (dy ? ay : 1.0 - ay);
          acc += wgt * img(yy, xx);
        }
      out(r, c) = float(acc);
    }
  return out;
}

inline Tensor2<uint8_t> warp_nearest(const Tensor2<uint8_t>& m,
                                     const AffineParams& p, uint8_t fill) {
  const int H = m.height(), W = m.width();
  Tensor2<uint8_t> out(H, W, fill);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      double sx, sy;
      affine_source_point(p, H, W, c, r, &sx, &sy);
      const int xx = int(std::lround(sx)), yy = int(std::lround(sy));
      if (xx < 0 || xx >= W || yy < 0 || yy >= H) continue;
      out(r, c) = m(yy, xx);
    }
  return out;
}

}  // namespace detail

// Applies one shared geometric transform: bilinear for the image, nearest
// neighbor for label maps. Out-of-frame fills: 0 intensity, `unlabeled`
// annotation, `background` mask.
inline Sample apply_affine(const Sample& s, const AffineParams& p) {
  Sample out;
  out.id = s.id;
  out.image = detail::warp_bilinear(s.image, p);
  out.annotation = detail::warp_nearest(s.annotation, p, kUnlabeled);
  if (s.full_mask)
    out.full_mask = detail::warp_nearest(*s.full_mask, p, kBackground);
  return out;
}

inline Sample augment(const Sample& s, const AugmentConfig& cfg,
                      RandomStream* rng) {
  cfg.validate();
  if (!cfg.enabled) return s;
  const auto p =
      sample_augment_params(cfg, s.image.height(), s.image.width(), rng);
  return apply_affine(s, p);
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

namespace detail {

// Two-way largest-remainder split of n items.
inline std::pair<int, int> split_two(int n, double ratio_a, double ratio_b) {
  const double ea = n * ratio_a, eb = n * ratio_b;
  int fa = int(std::floor(ea)), fb = int(std::floor(eb));
  for (int left = n - fa - fb; left > 0; --left) {
    if (ea - fa >= eb - fb)
      ++fa;
    else
      ++fb;
  }
  return {fa, fb};
}

}  // namespace detail

// 80/20 test split, then 9:1 train/val inside the 80%, sizes by largest
// remainder. Deterministic under seed.
inline SplitDescriptor split_dataset(const std::vector<std::string>& ids,
                                     const SplitRatios& ratios, uint64_t seed) {
  if (ids.size() < 10)
    throw DataError("split_dataset: need at least 10 ids, got " +
                    std::to_string(ids.size()));
  if (std::abs(ratios.train_val + ratios.test - 1.0) > 1e-9 ||
      ratios.val_of_trainval < 0.0 || ratios.val_of_trainval > 1.0)
    throw ConfigError("split: ratios must satisfy train_val + test = 1");

  std::vector<std::string> shuffled = ids;
  RandomStream rng(seed, "split");
  for (size_t i = shuffled.size(); i > 1; --i)
    std::swap(shuffled[i - 1], shuffled[size_t(rng.uniform_int(i))]);

  const auto [n_trainval, n_test] =
      detail::split_two(int(ids.size()), ratios.train_val, ratios.test);
  const auto [n_train, n_val] = detail::split_two(
      n_trainval, 1.0 - ratios.val_of_trainval, ratios.val_of_trainval);

  SplitDescriptor out;
  out.train.assign(shuffled.begin(), shuffled.begin() + n_train);
  out.val.assign(shuffled.begin() + n_train,
                 shuffled.begin() + n_train + n_val);
  out.test.assign(shuffled.begin() + n_train + n_val,
                  shuffled.begin() + n_train + n_val + n_test);
  return out;
}

// ---------------------------------------------------------------------------
// Batch stream: single-consumer, order fixed by the shuffle stream.
// ---------------------------------------------------------------------------

class BatchStream {
 public:
  BatchStream(const std::vector<const Sample*>& samples, int batch_size)
      : samples_(samples), batch_size_(batch_size) {
    if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
    order_.resize(samples.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  }

  void shuffle(RandomStream* rng) {
    for (size_t i = order_.size(); i > 1; --i)
      std::swap(order_[i - 1], order_[size_t(rng->uniform_int(i))]);
  }

  size_t n_batches() const {
    return (samples_.size() + batch_size_ - 1) / size_t(batch_size_);
  }

  std::vector<const Sample*> batch(size_t b) const {
    std::vector<const Sample*> out;
    const size_t begin = b * size_t(batch_size_);
    const size_t end = std::min(begin + batch_size_, samples_.size());
    for (size_t i = begin; i < end; ++i) out.push_back(samples_[order_[i]]);
    return out;
  }

 private:
  std::vector<const Sample*> samples_;
  int batch_size_;
  std::vector<size_t> order_;
};

}  // namespace branchseg
