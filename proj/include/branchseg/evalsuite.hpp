// branchseg/evalsuite.hpp -- evaluation and the two ablations: decoder count
// x lambda sensitivity, and annotation-coverage sweep, plus the baseline
// regularizer comparison harness and CSV/plot report emission.
//
// Grid cells are independent seeded training runs; they may execute on
// worker threads. Determinism is per cell: rerunning a cell with its
// recorded seed on one thread reproduces its mIoU.
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
#include <atomic>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "branchseg/common.hpp"
#include "branchseg/dataio.hpp"
#include "branchseg/metrics.hpp"
#include "branchseg/synthdata.hpp"
#include "branchseg/trainer.hpp"

namespace branchseg {

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  struct PerImage {
    std::string id;
    std::vector<double> per_class;
    double miou = 0.0;
  };
  std::vector<PerImage> images;
  double dataset_miou = 0.0;  // mean over images of per-image class-mean IoU
  int n_images = 0;
};

template <typename Scalar>
EvalResult evaluate(const Model<Scalar>& model,
                    const std::vector<const Sample*>& samples,
                    bool normalize_inputs = true) {
  EvalResult res;
  for (const Sample* s : samples) {
    if (!s->full_mask)
      throw DataError("evaluate: sample '" + s->id + "' has no full mask");
    const Image img = normalize_inputs ? normalize(s->image) : s->image;
    const FullMask pred = model.segment(img);
    const IoUResult iou = miou(pred, *s->full_mask, model.config().n_classes);
    res.images.push_back({s->id, iou.per_class, iou.mean});
    res.dataset_miou += iou.mean;
  }
  res.n_images = int(samples.size());
  if (res.n_images > 0) res.dataset_miou /= res.n_images;
  return res;
}

// ---------------------------------------------------------------------------
// Ablation grids
// ---------------------------------------------------------------------------

struct AblationCell {
  std::string method = "consistency";
  Regularizer regularizer = Regularizer::kSharedConsistency;
  int decoders = 3;
  double lambda_main = 0.5;
  double coverage = 0.5;
  double bg_coverage = 0.02;
  uint64_t seed = 0;

  double miou = 0.0;
  int best_epoch = 0;
  double wall_seconds = 0.0;
  bool failed = false;
  std::string error;
};

struct AblationGrid {
  std::vector<AblationCell> cells;
};

// Shared inputs of a grid: full-mask data (scribbles are regenerated per
// coverage from the same masks), the base architecture, and the training
// recipe. Splits stay identical across every cell.
struct AblationSetup {
  std::vector<Sample> train, val, test;  // all with full masks
  ArchConfig arch;
  TrainConfig train_cfg;
  uint64_t scribble_seed = 0x5c71bb1eULL;
};

inline std::vector<const Sample*> sample_ptrs(const std::vector<Sample>& v) {
  std::vector<const Sample*> out;
  out.reserve(v.size());
  for (const auto& s : v) out.push_back(&s);
  return out;
}

// Scribbles for a given coverage depend only on (scribble_seed, coverage,
// image id), never on the training seed, so cells at one coverage share
// identical annotations.
inline uint64_t scribble_image_seed(uint64_t base, double coverage,
                                    double bg_coverage, const std::string& id) {
  uint64_t h = splitmix64(base), bits = 0;
  std::memcpy(&bits, &coverage, sizeof bits);
  h = splitmix64(h ^ bits);
  std::memcpy(&bits, &bg_coverage, sizeof bits);
  h = splitmix64(h ^ bits);
  return splitmix64(h ^ fnv1a64(id));
}

inline std::vector<Sample> with_scribbles(const std::vector<Sample>& src,
                                          double coverage, double bg_coverage,
                                          uint64_t scribble_seed) {
  std::vector<Sample> out = src;
  for (auto& s : out) {
    if (!s.full_mask)
      throw DataError("with_scribbles: sample '" + s.id + "' has no full mask");
    s.annotation = make_scribbles(
        *s.full_mask, coverage, bg_coverage,
        scribble_image_seed(scribble_seed, coverage, bg_coverage, s.id));
  }
  return out;
}

inline ArchConfig arch_for_k(const ArchConfig& base, int K) {
  ArchConfig a = base;
  a.n_decoders = K;
  if (int(a.dilation_rates.size()) != K) {
    if (int(a.dilation_rates.size()) > K)
      a.dilation_rates.resize(size_t(K));
    else
      a.dilation_rates = default_dilation_rates(K);
  }
  return a;
}

namespace detail {

template <typename Fn>
void parallel_cells(size_t n, int workers, Fn fn) {
  if (workers <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  const int nw = int(std::min<size_t>(size_t(workers), n));
  for (int w = 0; w < nw; ++w)
    pool.emplace_back([&] {
      for (size_t i; (i = next.fetch_add(1)) < n;) fn(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace detail

// Trains and evaluates every cell in place. Training failures mark the cell
// failed and the grid continues.
template <typename Scalar = float>
void run_cells(const AblationSetup& setup, AblationGrid* grid, int workers = 1) {
  detail::parallel_cells(grid->cells.size(), workers, [&](size_t i) {
    AblationCell& cell = grid->cells[i];
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const auto train_s = with_scribbles(setup.train, cell.coverage,
                                          cell.bg_coverage,
                                          setup.scribble_seed);
      const auto val_s = with_scribbles(setup.val, cell.coverage,
                                        cell.bg_coverage, setup.scribble_seed);
      Model<Scalar> model(arch_for_k(setup.arch, cell.decoders));
      model.init_params(cell.seed);
      TrainConfig tc = setup.train_cfg;
      tc.seed = cell.seed;
      tc.lambda_main = cell.lambda_main;
      tc.regularizer = cell.regularizer;
      Trainer<Scalar> trainer(&model, tc);
      const TrainReport rep =
          trainer.train(sample_ptrs(train_s), sample_ptrs(val_s));
      const EvalResult ev =
          evaluate(model, sample_ptrs(setup.test), tc.normalize_inputs);
      cell.miou = ev.dataset_miou;
      cell.best_epoch = rep.best_epoch;
    } catch (const std::exception& e) {
      cell.failed = true;
      cell.error = e.what();
    }
    cell.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
  });
}

// Decoder-count x lambda grid at fixed coverage.
inline AblationGrid make_decoder_grid(const std::vector<int>& decoder_counts,
                                      const std::vector<double>& lambda_grid,
                                      const std::vector<uint64_t>& seeds,
                                      double coverage, double bg_coverage) {
  AblationGrid g;
  for (int K : decoder_counts)
    for (double lam : lambda_grid)
      for (uint64_t s : seeds) {
        AblationCell c;
        c.method = "consistency";
        c.regularizer = Regularizer::kSharedConsistency;
        c.decoders = K;
        c.lambda_main = lam;
        c.coverage = coverage;
        c.bg_coverage = bg_coverage;
        c.seed = s;
        g.cells.push_back(c);
      }
  return g;
}

template <typename Scalar = float>
AblationGrid run_decoder_ablation(const AblationSetup& setup,
                                  const std::vector<int>& decoder_counts,
                                  const std::vector<double>& lambda_grid,
                                  const std::vector<uint64_t>& seeds,
                                  double coverage, double bg_coverage,
                                  int workers = 1) {
  AblationGrid g = make_decoder_grid(decoder_counts, lambda_grid, seeds,
                                     coverage, bg_coverage);
  run_cells<Scalar>(setup, &g, workers);
  return g;
}

// Coverage sweep: the axis scales the whole annotation budget. Foreground
// runs cover the axis fraction of curve pixels and background strokes grow
// in proportion (bg_at_full at coverage 1.0), so the labeled class balance
// does not drift across the sweep. Coverage 1.0 labels every curve pixel,
// not a dense mask.
inline AblationGrid make_coverage_grid(const std::vector<double>& coverages,
                                       const std::vector<uint64_t>& seeds,
                                       int decoders, double lambda_main,
                                       double bg_at_full) {
  AblationGrid g;
  for (double cov : coverages)
    for (uint64_t s : seeds) {
      AblationCell c;
      c.method = "consistency";
      c.regularizer = Regularizer::kSharedConsistency;
      c.decoders = decoders;
      c.lambda_main = lambda_main;
      c.coverage = cov;
      c.bg_coverage = std::min(1.0, bg_at_full * cov);
      c.seed = s;
      g.cells.push_back(c);
    }
  return g;
}

template <typename Scalar = float>
AblationGrid run_coverage_sweep(const AblationSetup& setup,
                                const std::vector<double>& coverages,
                                const std::vector<uint64_t>& seeds,
                                double bg_at_full, int workers = 1) {
  AblationGrid g =
      make_coverage_grid(coverages, seeds, setup.arch.n_decoders,
                         setup.train_cfg.lambda_main, bg_at_full);
  run_cells<Scalar>(setup, &g, workers);
  return g;
}

// Baseline comparison: each weak-supervision regularizer replaces the
// consistency term on a single-decoder model, everything else held fixed.
struct MethodSpec {
  std::string name;
  Regularizer regularizer = Regularizer::kNone;
  int decoders = 1;
};

inline std::vector<MethodSpec> standard_methods() {
  return {{"consistency", Regularizer::kSharedConsistency, 3},
          {"entropy_min", Regularizer::kEntropyMin, 1},
          {"total_variation", Regularizer::kTotalVariation, 1},
          {"mumford_shah", Regularizer::kMumfordShah, 1}};
}

inline AblationGrid make_method_grid(const std::vector<MethodSpec>& methods,
                                     const std::vector<double>& coverages,
                                     const std::vector<uint64_t>& seeds,
                                     double lambda_main, double bg_coverage,
                                     bool sweep_bg) {
  AblationGrid g;
  for (const auto& m : methods)
    for (double cov : coverages)
      for (uint64_t s : seeds) {
        AblationCell c;
        c.method = m.name;
        c.regularizer = m.regularizer;
        c.decoders = m.decoders;
        c.lambda_main = lambda_main;
        c.coverage = cov;
        c.bg_coverage = sweep_bg ? cov : bg_coverage;
        c.seed = s;
        g.cells.push_back(c);
      }
  return g;
}

template <typename Scalar = float>
AblationGrid run_method_comparison(const AblationSetup& setup,
                                   const std::vector<MethodSpec>& methods,
                                   const std::vector<double>& coverages,
                                   const std::vector<uint64_t>& seeds,
                                   double bg_coverage, int workers = 1) {
  AblationGrid g =
      make_method_grid(methods, coverages, seeds,
                       setup.train_cfg.lambda_main, bg_coverage, false);
  run_cells<Scalar>(setup, &g, workers);
  return g;
}

// Seed-mean mIoU over the cells matching a predicate; returns the number of
// contributing cells through n (failed cells never contribute).
template <typename Pred>
double grid_mean_miou(const AblationGrid& g, Pred pred, int* n = nullptr) {
  double acc = 0.0;
  int count = 0;
  for (const auto& c : g.cells) {
    if (c.failed || !pred(c)) continue;
    acc += c.miou;
    ++count;
  }
  if (n) *n = count;
  return count ? acc / count : 0.0;
}

// ---------------------------------------------------------------------------
// Report emission: CSV tables and SVG plots
// ---------------------------------------------------------------------------

inline constexpr const char* kAblationHeader =
    "axis_decoders,axis_lambda,axis_coverage,seed,miou,best_epoch,"
    "wall_seconds";
inline constexpr const char* kComparisonHeader =
    "method,coverage,miou,gap_to_full";
inline constexpr const char* kIouFooter =
    "# mIoU: mean over images of per-image class-mean IoU; a class empty in "
    "both prediction and ground truth counts as IoU 1.";

inline void write_ablation_csv(const std::string& path,
                               const AblationGrid& grid) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << kAblationHeader << "\n";
  for (const auto& c : grid.cells) {
    if (c.failed) continue;
    f << c.decoders << ',' << format_g17(c.lambda_main) << ','
      << format_g17(c.coverage) << ',' << c.seed << ',' << format_g17(c.miou)
      << ',' << c.best_epoch << ',' << format_g17(c.wall_seconds) << "\n";
  }
  f << kIouFooter << "\n";
}

inline AblationGrid read_ablation_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("missing ablation file " + path);
  std::string line;
  if (!std::getline(f, line) || line != kAblationHeader)
    throw DataError("bad ablation header in " + path);
  AblationGrid g;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 7) throw DataError("short ablation row in " + path);
    AblationCell c;
    c.decoders = std::stoi(fields[0]);
    c.lambda_main = std::strtod(fields[1].c_str(), nullptr);
    c.coverage = std::strtod(fields[2].c_str(), nullptr);
    c.seed = std::stoull(fields[3]);
    c.miou = std::strtod(fields[4].c_str(), nullptr);
    c.best_epoch = std::stoi(fields[5]);
    c.wall_seconds = std::strtod(fields[6].c_str(), nullptr);
    g.cells.push_back(c);
  }
  return g;
}

struct ComparisonRow {
  std::string method;
  double coverage = 0.0;
  double miou = 0.0;
  double gap_to_full = 0.0;  // reference-coverage mean minus this mean
};

// Seed-mean per (method, coverage); the gap reference is each method's mean
// at its own highest coverage present in the grid.
inline std::vector<ComparisonRow> aggregate_comparison(
    const AblationGrid& grid) {
  std::vector<ComparisonRow> rows;
  for (const auto& c : grid.cells) {
    if (c.failed) continue;
    bool seen = false;
    for (const auto& r : rows)
      if (r.method == c.method && r.coverage == c.coverage) seen = true;
    if (seen) continue;
    int n = 0;
    const double m = grid_mean_miou(
        grid,
        [&](const AblationCell& x) {
          return x.method == c.method && x.coverage == c.coverage;
        },
        &n);
    rows.push_back({c.method, c.coverage, m, 0.0});
  }
  for (auto& r : rows) {
    double ref_cov = r.coverage, ref_miou = r.miou;
    for (const auto& o : rows)
      if (o.method == r.method && o.coverage > ref_cov) {
        ref_cov = o.coverage;
        ref_miou = o.miou;
      }
    r.gap_to_full = ref_miou - r.miou;
  }
  return rows;
}

inline void write_comparison_csv(const std::string& path,
                                 const std::vector<ComparisonRow>& rows) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << kComparisonHeader << "\n";
  for (const auto& r : rows)
    f << r.method << ',' << format_g17(r.coverage) << ',' << format_g17(r.miou)
      << ',' << format_g17(r.gap_to_full) << "\n";
  f << kIouFooter << "\n";
}

inline std::vector<ComparisonRow> read_comparison_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("missing comparison file " + path);
  std::string line;
  if (!std::getline(f, line) || line != kComparisonHeader)
    throw DataError("bad comparison header in " + path);
  std::vector<ComparisonRow> rows;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string m, a, b, c;
    if (!std::getline(ss, m, ',') || !std::getline(ss, a, ',') ||
        !std::getline(ss, b, ',') || !std::getline(ss, c, ','))
      throw DataError("short comparison row in " + path);
    rows.push_back({m, std::strtod(a.c_str(), nullptr),
                    std::strtod(b.c_str(), nullptr),
                    std::strtod(c.c_str(), nullptr)});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Minimal static SVG line plots
// ---------------------------------------------------------------------------

struct PlotSeries {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

inline void write_line_plot_svg(const std::string& path,
                                const std::string& title,
                                const std::string& xlabel,
                                const std::string& ylabel,
                                const std::vector<PlotSeries>& series) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c",
                                  "#9467bd", "#ff7f0e", "#8c564b"};
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool any = false;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      if (!any) {
        x0 = x1 = x;
        y0 = y1 = y;
        any = true;
      }
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (x1 - x0 < 1e-12) {
    x0 -= 0.5;
    x1 += 0.5;
  }
  if (y1 - y0 < 1e-12) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  const double padx = 0.05 * (x1 - x0), pady = 0.08 * (y1 - y0);
  x0 -= padx;
  x1 += padx;
  y0 -= pady;
  y1 += pady;
  const double L = 70, R = 615, T = 40, B = 370;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (R - L); };
  auto py = [&](double y) { return B - (y - y0) / (y1 - y0) * (B - T); };

  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='640' height='420' "
       "viewBox='0 0 640 420'>\n"
    << "<rect width='640' height='420' fill='white'/>\n"
    << "<text x='320' y='22' text-anchor='middle' font-size='15' "
       "font-family='sans-serif'>" << title << "</text>\n";
  f << "<line x1='" << L << "' y1='" << B << "' x2='" << R << "' y2='" << B
    << "' stroke='black'/>\n"
    << "<line x1='" << L << "' y1='" << T << "' x2='" << L << "' y2='" << B
    << "' stroke='black'/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0;
    const double yv = y0 + (y1 - y0) * i / 4.0;
    f << "<text x='" << px(xv) << "' y='" << B + 16
      << "' text-anchor='middle' font-size='10' font-family='sans-serif'>"
      << format_g17(std::round(xv * 1000) / 1000).substr(0, 6) << "</text>\n";
    f << "<text x='" << L - 6 << "' y='" << py(yv) + 3
      << "' text-anchor='end' font-size='10' font-family='sans-serif'>"
      << format_g17(std::round(yv * 1000) / 1000).substr(0, 6) << "</text>\n";
  }
  f << "<text x='" << (L + R) / 2 << "' y='400' text-anchor='middle' "
       "font-size='12' font-family='sans-serif'>" << xlabel << "</text>\n";
  f << "<text x='16' y='" << (T + B) / 2
    << "' text-anchor='middle' font-size='12' font-family='sans-serif' "
       "transform='rotate(-90 16 " << (T + B) / 2 << ")'>" << ylabel
    << "</text>\n";

  for (size_t si = 0; si < series.size(); ++si) {
    const char* color = kColors[si % 6];
    const auto& pts = series[si].points;
    if (pts.size() > 1) {
      f << "<polyline fill='none' stroke='" << color << "' stroke-width='1.5' "
           "points='";
      for (const auto& [x, y] : pts) f << px(x) << "," << py(y) << " ";
      f << "'/>\n";
    }
    for (const auto& [x, y] : pts)
      f << "<circle cx='" << px(x) << "' cy='" << py(y) << "' r='2.5' fill='"
        << color << "'/>\n";
    f << "<text x='" << R - 4 << "' y='" << T + 14 + 14 * double(si)
      << "' text-anchor='end' font-size='11' font-family='sans-serif' fill='"
      << color << "'>" << series[si].name << "</text>\n";
  }
  f << "</svg>\n";
}

// ---------------------------------------------------------------------------
// emit_report: everything the report command writes
// ---------------------------------------------------------------------------

struct ReportInputs {
  const AblationGrid* decoder_grid = nullptr;
  const AblationGrid* coverage_grid = nullptr;
  // Method-comparison cells feed comparison.csv only; ablation.csv has no
  // method column.
  const AblationGrid* method_grid = nullptr;
  const std::vector<EpochRow>* loss_curve = nullptr;
};

inline std::vector<std::string> emit_report(const ReportInputs& in,
                                            const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> written;

  AblationGrid merged;
  if (in.decoder_grid)
    merged.cells.insert(merged.cells.end(), in.decoder_grid->cells.begin(),
                        in.decoder_grid->cells.end());
  if (in.coverage_grid && in.coverage_grid != in.decoder_grid)
    merged.cells.insert(merged.cells.end(), in.coverage_grid->cells.begin(),
                        in.coverage_grid->cells.end());
  {
    const std::string p = out_dir + "/ablation.csv";
    write_ablation_csv(p, merged);
    written.push_back(p);
  }
  {
    AblationGrid with_methods = merged;
    if (in.method_grid)
      with_methods.cells.insert(with_methods.cells.end(),
                                in.method_grid->cells.begin(),
                                in.method_grid->cells.end());
    const std::string p = out_dir + "/comparison.csv";
    write_comparison_csv(p, aggregate_comparison(with_methods));
    written.push_back(p);
  }

  if (in.decoder_grid) {
    std::vector<int> ks;
    for (const auto& c : in.decoder_grid->cells)
      if (!c.failed &&
          std::find(ks.begin(), ks.end(), c.decoders) == ks.end())
        ks.push_back(c.decoders);
    std::sort(ks.begin(), ks.end());
    PlotSeries s{"seed mean", {}};
    for (int k : ks)
      s.points.push_back(
          {double(k), grid_mean_miou(*in.decoder_grid, [&](const AblationCell&
                                                               c) {
             return c.decoders == k;
           })});
    const std::string p = out_dir + "/miou_vs_decoders.svg";
    write_line_plot_svg(p, "Test mIoU vs decoder count", "decoders", "mIoU",
                        {s});
    written.push_back(p);
  }
  if (in.coverage_grid) {
    std::vector<double> covs;
    for (const auto& c : in.coverage_grid->cells)
      if (!c.failed &&
          std::find(covs.begin(), covs.end(), c.coverage) == covs.end())
        covs.push_back(c.coverage);
    std::sort(covs.begin(), covs.end());
    PlotSeries s{"seed mean", {}};
    for (double cov : covs)
      s.points.push_back(
          {cov, grid_mean_miou(*in.coverage_grid, [&](const AblationCell& c) {
             return c.coverage == cov;
           })});
    const std::string p = out_dir + "/miou_vs_coverage.svg";
    write_line_plot_svg(p, "Test mIoU vs annotation coverage", "coverage",
                        "mIoU", {s});
    written.push_back(p);
  }
  if (in.loss_curve) {
    PlotSeries sup{"l_sup", {}}, cons{"l_cons", {}}, tot{"l_total", {}},
        val{"val_miou", {}};
    for (const auto& r : *in.loss_curve) {
      sup.points.push_back({double(r.epoch), r.l_sup});
      cons.points.push_back({double(r.epoch), r.l_cons});
      tot.points.push_back({double(r.epoch), r.l_total});
      val.points.push_back({double(r.epoch), r.val_miou});
    }
    const std::string p = out_dir + "/loss_curves.svg";
    write_line_plot_svg(p, "Training curves", "epoch", "value",
                        {sup, cons, tot, val});
    written.push_back(p);
  }
  return written;
}

}  // namespace branchseg
