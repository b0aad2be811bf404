// branchseg/metrics.hpp -- per-class intersection-over-union on hard masks.
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

#include <vector>

#include "branchseg/common.hpp"
#include "branchseg/types.hpp"

namespace branchseg {

struct IoUResult {
  std::vector<double> per_class;
  double mean = 0.0;
};

// IoU_c = |pred_c AND gt_c| / |pred_c OR gt_c|. A class absent from both
// masks contributes 1 by convention (avoids 0/0 on empty-foreground images).
inline IoUResult miou(const FullMask& pred, const FullMask& gt,
                      int n_classes = 2) {
  if (!pred.same_shape(gt))
    throw ShapeError("miou: pred " + std::to_string(pred.height()) + "x" +
                     std::to_string(pred.width()) + " vs gt " +
                     std::to_string(gt.height()) + "x" +
                     std::to_string(gt.width()));
  std::vector<long> inter(size_t(n_classes), 0), uni(size_t(n_classes), 0);
  for (size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i], g = gt[i];
    if (p == g) {
      ++inter[size_t(p)];
      ++uni[size_t(p)];
    } else {
      ++uni[size_t(p)];
      ++uni[size_t(g)];
    }
  }
  IoUResult r;
  r.per_class.resize(size_t(n_classes));
  for (int c = 0; c < n_classes; ++c) {
    r.per_class[size_t(c)] =
        uni[size_t(c)] == 0 ? 1.0 : double(inter[size_t(c)]) / uni[size_t(c)];
    r.mean += r.per_class[size_t(c)];
  }
  r.mean /= n_classes;
  return r;
}

}  // namespace branchseg
