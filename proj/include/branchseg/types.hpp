// branchseg/types.hpp -- domain types shared across modules.
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

#include <cstdint>

#include "branchseg/tensor.hpp"

namespace branchseg {

// Label alphabet. Scribble maps use all three values, full masks only the
// first two.
inline constexpr uint8_t kBackground = 0;
inline constexpr uint8_t kForeground = 1;
inline constexpr uint8_t kUnlabeled = 2;

// On-disk 8-bit encodings (bit-exact dataset contract).
inline constexpr uint8_t kPngBackground = 0;
inline constexpr uint8_t kPngForeground = 255;
inline constexpr uint8_t kPngUnlabeled = 127;

// H x W grayscale intensities in [0,1].
using Image = Tensor2<float>;

// H x W binary map {kBackground, kForeground}.
using FullMask = Tensor2<uint8_t>;

// H x W ternary map {kBackground, kForeground, kUnlabeled}.
using AnnotationMap = Tensor2<uint8_t>;

// C x H x W per-pixel class probabilities; each pixel's channel vector sums
// to 1. Loss math runs in double regardless of the network scalar type.
using ProbMap = Tensor3<double>;

inline int count_value(const Tensor2<uint8_t>& m, uint8_t v) {
  int n = 0;
  for (size_t i = 0; i < m.size(); ++i) n += (m[i] == v);
  return n;
}

}  // namespace branchseg
