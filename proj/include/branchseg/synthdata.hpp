// branchseg/synthdata.hpp -- synthetic curvilinear images, full masks, and
// scribble-style partial annotations.
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
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "branchseg/common.hpp"
#include "branchseg/types.hpp"

namespace branchseg {

struct SynthConfig {
  int image_size = 64;          // pixels per side, square
  int n_images = 0;
  int curve_control_points = 6; // in [4, 8]
  int curve_thickness_px = 2;   // in [1, 3]
  int n_distractors = 2;
  double noise_sigma = 0.05;    // additive Gaussian std, intensity units
  double contrast = 0.6;        // foreground-background gap, in (0, 1]
  uint64_t seed = 0;

  void validate() const {
    if (image_size < 16)
      throw ConfigError("synth.image_size: must be >= 16");
    if (n_images < 0) throw ConfigError("synth.n_images: must be >= 0");
    if (curve_control_points < 4 || curve_control_points > 8)
      throw ConfigError("synth.curve_control_points: must be in [4,8]");
    if (curve_thickness_px < 1 || curve_thickness_px > 3)
      throw ConfigError("synth.curve_thickness_px: must be in [1,3]");
    if (n_distractors < 0)
      throw ConfigError("synth.n_distractors: must be >= 0");
    if (noise_sigma < 0.0 || noise_sigma > 1.0)
      throw ConfigError("synth.noise_sigma: must be in [0,1]");
    if (contrast <= 0.0 || contrast > 1.0)
      throw ConfigError("synth.contrast: must be in (0,1]");
  }
};

namespace detail {

struct Vec2 {
  double x, y;
};

// Centripetal-free (uniform) Catmull-Rom through the given points, clamped
// at the ends. Control points are sorted by x so the curve sweeps the frame
// like a guidewire rather than looping.
inline std::vector<Vec2> catmull_rom(const std::vector<Vec2>& pts,
                                     int samples_per_segment) {
  std::vector<Vec2> out;
  const int n = int(pts.size());
  out.reserve(size_t(samples_per_segment) * (n - 1) + 1);
  auto at = [&](int i) { return pts[size_t(std::clamp(i, 0, n - 1))]; };
  for (int seg = 0; seg + 1 < n; ++seg) {
    const Vec2 p0 = at(seg - 1), p1 = at(seg), p2 = at(seg + 1), p3 = at(seg + 2);
    for (int s = 0; s < samples_per_segment; ++s) {
      const double t = double(s) / samples_per_segment;
      const double t2 = t * t, t3 = t2 * t;
      const double b0 = -0.5 * t3 + t2 - 0.5 * t;
      const double b1 = 1.5 * t3 - 2.5 * t2 + 1.0;
      const double b2 = -1.5 * t3 + 2.0 * t2 + 0.5 * t;
      const double b3 = 0.5 * t3 - 0.5 * t2;
      out.push_back({b0 * p0.x + b1 * p1.x + b2 * p2.x + b3 * p3.x,
                     b0 * p0.y + b1 * p1.y + b2 * p2.y + b3 * p3.y});
    }
  }
  out.push_back(pts.back());
  return out;
}

// Rasterizes a curve of the given pixel thickness into `mask`.
// Supersampled at 4x: stamp discs along a dense polyline on the fine grid,
// then a coarse pixel is set when at least half of its 16 subpixels are.
inline void rasterize_curve(const std::vector<Vec2>& curve, double thickness_px,
                            FullMask* mask) {
  constexpr int kScale = 4;
  const int H = mask->height(), W = mask->width();
  const int sh = H * kScale, sw = W * kScale;
  std::vector<uint8_t> fine(size_t(sh) * sw, 0);
  const double radius = thickness_px * kScale * 0.5;
  const int ir = int(std::ceil(radius));

  auto stamp = [&](double sx, double sy) {
    const int cx = int(std::lround(sx)), cy = int(std::lround(sy));
    for (int dy = -ir; dy <= ir; ++dy) {
      const int y = cy + dy;
      if (y < 0 || y >= sh) continue;
      for (int dx = -ir; dx <= ir; ++dx) {
        const int x = cx + dx;
        if (x < 0 || x >= sw) continue;
        const double ddx = x - sx, ddy = y - sy;
        if (ddx * ddx + ddy * ddy <= radius * radius)
          fine[size_t(y) * sw + x] = 1;
      }
    }
  };

  for (size_t i = 0; i + 1 < curve.size(); ++i) {
    const Vec2 a{curve[i].x * kScale, curve[i].y * kScale};
    const Vec2 b{curve[i + 1].x * kScale, curve[i + 1].y * kScale};
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    const int steps = std::max(1, int(std::ceil(len * 2.0)));
    for (int s = 0; s <= steps; ++s) {
      const double t = double(s) / steps;
      stamp(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
    }
  }

  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      int covered = 0;
      for (int sy = 0; sy < kScale; ++sy)
        for (int sx = 0; sx < kScale; ++sx)
          covered += fine[size_t(r * kScale + sy) * sw + c * kScale + sx];
      if (covered >= kScale * kScale / 2) (*mask)(r, c) = kForeground;
    }
}

inline std::vector<Vec2> sample_control_points(int n, int size,
                                               RandomStream* rng) {
  const double margin = std::max(2.0, size * 0.08);
  std::vector<Vec2> pts(static_cast<size_t>(n));
  for (auto& p : pts) {
    p.x = rng->uniform(margin, size - 1 - margin);
    p.y = rng->uniform(margin, size - 1 - margin);
  }
  std::sort(pts.begin(), pts.end(),
            [](const Vec2& a, const Vec2& b) { return a.x < b.x; });
  return pts;
}

inline FullMask render_curve_mask(const SynthConfig& cfg, double thickness,
                                  RandomStream* rng) {
  FullMask mask(cfg.image_size, cfg.image_size, kBackground);
  const auto pts =
      sample_control_points(cfg.curve_control_points, cfg.image_size, rng);
  const auto curve = catmull_rom(pts, 16);
  rasterize_curve(curve, thickness, &mask);
  return mask;
}

}  // namespace detail

// One synthetic sample: a bright smooth "guidewire" curve at the configured
// contrast over a mid-gray background, plus lower-contrast distractor curves
// and additive Gaussian noise. The mask marks exactly the guidewire pixels.
inline std::pair<Image, FullMask> generate_sample(const SynthConfig& cfg,
                                                  uint64_t sample_seed) {
  const int S = cfg.image_size;
  const float bg_level = float(0.5 * (1.0 - cfg.contrast));
  const float fg_level = float(bg_level + cfg.contrast);
  // Distractors sit between background and guidewire intensity.
  const float distractor_level = float(bg_level + 0.4 * cfg.contrast);

  RandomStream rng(sample_seed);
  FullMask mask;
  // A curve through the frame interior always covers pixels; the retry is a
  // guard for degenerate control-point draws.
  for (int attempt = 0;; ++attempt) {
    mask = detail::render_curve_mask(cfg, cfg.curve_thickness_px, &rng);
    if (count_value(mask, kForeground) > 0) break;
    if (attempt > 16)
      throw DataError("synthdata: failed to render a nonempty curve");
  }

  Image img(S, S, bg_level);
  for (int d = 0; d < cfg.n_distractors; ++d) {
    const FullMask dm = detail::render_curve_mask(cfg, 1.0, &rng);
    for (size_t i = 0; i < dm.size(); ++i)
      if (dm[i] == kForeground) img[i] = distractor_level;
  }
  for (size_t i = 0; i < mask.size(); ++i)
    if (mask[i] == kForeground) img[i] = fg_level;

  if (cfg.noise_sigma > 0.0)
    for (size_t i = 0; i < img.size(); ++i)
      img[i] = float(img[i] + cfg.noise_sigma * rng.normal());
  for (size_t i = 0; i < img.size(); ++i)
    img[i] = std::clamp(img[i], 0.0f, 1.0f);

  return {std::move(img), std::move(mask)};
}

// Deterministic: every image derives its own substream from (seed, index),
// so the set is reproducible and order-independent.
inline std::vector<std::pair<Image, FullMask>> generate_dataset(
    const SynthConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<Image, FullMask>> out;
  out.reserve(size_t(cfg.n_images));
  for (int i = 0; i < cfg.n_images; ++i)
    out.push_back(generate_sample(cfg, splitmix64(cfg.seed ^ splitmix64(i))));
  return out;
}

namespace detail {

// Orders the pixels of one connected component by DFS from an endpoint
// (fewest-neighbors pixel). On a thin curve this walks along the skeleton,
// so contiguous index ranges are contiguous strokes.
inline std::vector<int> component_order(const FullMask& mask,
                                        const std::vector<int>& component) {
  const int W = mask.width(), H = mask.height();
  std::vector<int> order;
  order.reserve(component.size());
  std::vector<uint8_t> in_comp(mask.size(), 0), visited(mask.size(), 0);
  for (int p : component) in_comp[size_t(p)] = 1;

  auto neighbor_count = [&](int p) {
    const int r = p / W, c = p % W;
    int n = 0;
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) {
        if (!dr && !dc) continue;
        const int rr = r + dr, cc = c + dc;
        if (rr >= 0 && rr < H && cc >= 0 && cc < W &&
            in_comp[size_t(rr) * W + cc])
          ++n;
      }
    return n;
  };

  int start = component[0], best = neighbor_count(start);
  for (int p : component) {
    const int n = neighbor_count(p);
    if (n < best) {
      best = n;
      start = p;
    }
  }

  std::vector<int> stack{start};
  visited[size_t(start)] = 1;
  while (!stack.empty()) {
    const int p = stack.back();
    stack.pop_back();
    order.push_back(p);
    const int r = p / W, c = p % W;
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) {
        if (!dr && !dc) continue;
        const int rr = r + dr, cc = c + dc;
        if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
        const int q = rr * W + cc;
        if (in_comp[size_t(q)] && !visited[size_t(q)]) {
          visited[size_t(q)] = 1;
          stack.push_back(q);
        }
      }
  }
  return order;
}

inline std::vector<std::vector<int>> connected_components(
    const FullMask& mask) {
  const int W = mask.width(), H = mask.height();
  std::vector<uint8_t> seen(mask.size(), 0);
  std::vector<std::vector<int>> comps;
  for (size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] != kForeground || seen[i]) continue;
    comps.emplace_back();
    std::vector<int> stack{int(i)};
    seen[i] = 1;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      comps.back().push_back(p);
      const int r = p / W, c = p % W;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
          const size_t q = size_t(rr) * W + cc;
          if (mask[q] == kForeground && !seen[q]) {
            seen[q] = 1;
            stack.push_back(int(q));
          }
        }
    }
  }
  return comps;
}

// Largest-remainder apportionment of `total` over weights.
inline std::vector<int> apportion(const std::vector<size_t>& weights,
                                  int total) {
  const double wsum = double(std::accumulate(weights.begin(), weights.end(),
                                             size_t(0)));
  std::vector<int> out(weights.size(), 0);
  std::vector<std::pair<double, size_t>> rem;
  int assigned = 0;
  for (size_t i = 0; i < weights.size(); ++i) {
    const double exact = wsum > 0 ? total * (weights[i] / wsum) : 0.0;
    out[i] = int(exact);
    out[i] = std::min<int>(out[i], int(weights[i]));
    assigned += out[i];
    rem.push_back({exact - out[i], i});
  }
  std::sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  });
  for (size_t k = 0; assigned < total && k < rem.size(); ++k) {
    const size_t i = rem[k].second;
    if (out[i] < int(weights[i])) {
      ++out[i];
      ++assigned;
    }
  }
  // Spill any leftover into components with spare capacity.
  for (size_t i = 0; assigned < total && i < weights.size(); ++i) {
    const int spare = int(weights[i]) - out[i];
    const int take = std::min(spare, total - assigned);
    out[i] += take;
    assigned += take;
  }
  return out;
}

}  // namespace detail

// Degrades a full mask into a scribble-style partial annotation.
// Exactly floor(coverage * |fg|) foreground pixels are labeled, as contiguous
// runs along the curve skeleton; exactly floor(bg_coverage * |bg|) background
// pixels are labeled, as random short strokes. No label is ever flipped.
inline AnnotationMap make_scribbles(const FullMask& mask, double coverage,
                                    double bg_coverage, uint64_t seed) {
  if (coverage < 0.0 || coverage > 1.0)
    throw ConfigError("scribble.coverage: must be in [0,1]");
  if (bg_coverage < 0.0 || bg_coverage > 1.0)
    throw ConfigError("scribble.bg_coverage: must be in [0,1]");
  const int n_fg = count_value(mask, kForeground);
  if (n_fg == 0) throw DataError("make_scribbles: mask has no foreground");

  const int H = mask.height(), W = mask.width();
  AnnotationMap ann(H, W, kUnlabeled);
  RandomStream rng(seed);

  // Foreground: contiguous skeleton runs, exact global count.
  const int fg_quota = int(std::floor(coverage * n_fg));
  const auto comps = detail::connected_components(mask);
  std::vector<size_t> comp_sizes;
  comp_sizes.reserve(comps.size());
  for (const auto& c : comps) comp_sizes.push_back(c.size());
  const auto quotas = detail::apportion(comp_sizes, fg_quota);
  for (size_t ci = 0; ci < comps.size(); ++ci) {
    const int q = quotas[ci];
    if (q == 0) continue;
    const auto order = detail::component_order(mask, comps[ci]);
    const int n = int(order.size());
    const int offset = q >= n ? 0 : int(rng.uniform_int(uint64_t(n)));
    for (int j = 0; j < q; ++j)
      ann[size_t(order[size_t((offset + j) % n)])] = kForeground;
  }

  // Background: random short strokes, exact count, deterministic fallback
  // fill when strokes stop finding fresh pixels.
  const int n_bg = int(mask.size()) - n_fg;
  const int bg_quota = int(std::floor(bg_coverage * n_bg));
  int labeled_bg = 0;
  if (bg_quota == n_bg) {
    for (size_t i = 0; i < mask.size(); ++i)
      if (mask[i] == kBackground) ann[i] = kBackground;
    labeled_bg = bg_quota;
  } else {
    const int max_strokes = std::max(64, bg_quota);
    for (int s = 0; s < max_strokes && labeled_bg < bg_quota; ++s) {
      double x = rng.uniform(0.0, W - 1.0);
      double y = rng.uniform(0.0, H - 1.0);
      const double theta = rng.uniform(0.0, 6.283185307179586);
      const double dx = std::cos(theta) * 0.7, dy = std::sin(theta) * 0.7;
      const int len = 6 + int(rng.uniform_int(12));
      for (int t = 0; t < len && labeled_bg < bg_quota; ++t) {
        const int r = int(std::lround(y)), c = int(std::lround(x));
        if (r >= 0 && r < H && c >= 0 && c < W) {
          const size_t p = size_t(r) * W + c;
          if (mask[p] == kBackground && ann[p] == kUnlabeled) {
            ann[p] = kBackground;
            ++labeled_bg;
          }
        }
        x += dx;
        y += dy;
      }
    }
    if (labeled_bg < bg_quota) {
      std::vector<int> rest;
      for (size_t i = 0; i < mask.size(); ++i)
        if (mask[i] == kBackground && ann[i] == kUnlabeled) rest.push_back(int(i));
      // Fisher-Yates with the same stream keeps the result seed-deterministic.
      for (size_t i = rest.size(); i > 1; --i)
        std::swap(rest[i - 1], rest[size_t(rng.uniform_int(i))]);
      for (size_t i = 0; labeled_bg < bg_quota; ++i, ++labeled_bg)
        ann[size_t(rest[i])] = kBackground;
    }
  }
  return ann;
}

}  // namespace branchseg
