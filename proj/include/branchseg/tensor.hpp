// branchseg/tensor.hpp -- dense row-major 2D/3D tensors.
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
#include <cstddef>
#include <string>
#include <vector>

#include "branchseg/common.hpp"

namespace branchseg {

// H x W plane, row-major.
template <typename T>
class Tensor2 {
 public:
  Tensor2() = default;
  Tensor2(int h, int w, T fill = T{}) : h_(h), w_(w), v_(size_t(h) * w, fill) {}

  int height() const { return h_; }
  int width() const { return w_; }
  size_t size() const { return v_.size(); }

  T& operator()(int r, int c) { return v_[size_t(r) * w_ + c]; }
  const T& operator()(int r, int c) const { return v_[size_t(r) * w_ + c]; }
  T& operator[](size_t i) { return v_[i]; }
  const T& operator[](size_t i) const { return v_[i]; }

  T* data() { return v_.data(); }
  const T* data() const { return v_.data(); }

  void fill(T value) { std::fill(v_.begin(), v_.end(), value); }

  bool same_shape(const Tensor2& o) const { return h_ == o.h_ && w_ == o.w_; }

  bool operator==(const Tensor2& o) const {
    return h_ == o.h_ && w_ == o.w_ && v_ == o.v_;
  }

 private:
  int h_ = 0, w_ = 0;
  std::vector<T> v_;
};

// C x H x W volume; channel planes are contiguous.
template <typename T>
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(int c, int h, int w, T fill = T{})
      : c_(c), h_(h), w_(w), v_(size_t(c) * h * w, fill) {}

  int channels() const { return c_; }
  int height() const { return h_; }
  int width() const { return w_; }
  size_t size() const { return v_.size(); }
  size_t plane() const { return size_t(h_) * w_; }

  T& operator()(int c, int r, int col) {
    return v_[(size_t(c) * h_ + r) * w_ + col];
  }
  const T& operator()(int c, int r, int col) const {
    return v_[(size_t(c) * h_ + r) * w_ + col];
  }
  T& operator[](size_t i) { return v_[i]; }
  const T& operator[](size_t i) const { return v_[i]; }

  T* data() { return v_.data(); }
  const T* data() const { return v_.data(); }
  T* channel(int c) { return v_.data() + size_t(c) * plane(); }
  const T* channel(int c) const { return v_.data() + size_t(c) * plane(); }

  void fill(T value) { std::fill(v_.begin(), v_.end(), value); }
  void zero() { fill(T{}); }

  bool same_shape(const Tensor3& o) const {
    return c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }

  bool operator==(const Tensor3& o) const {
    return c_ == o.c_ && h_ == o.h_ && w_ == o.w_ && v_ == o.v_;
  }

  std::string shape_str() const {
    return std::to_string(c_) + "x" + std::to_string(h_) + "x" +
           std::to_string(w_);
  }

 private:
  int c_ = 0, h_ = 0, w_ = 0;
  std::vector<T> v_;
};

template <typename T>
void require_same_shape(const Tensor3<T>& a, const Tensor3<T>& b,
                        const std::string& who) {
  if (!a.same_shape(b))
    throw ShapeError(who + ": shape mismatch, expected " + a.shape_str() +
                     " got " + b.shape_str());
}

}  // namespace branchseg
