// branchseg/common.hpp -- error types, seeded rng streams, small helpers.
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
#include <cstdint>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace branchseg {

// Invalid or out-of-range configuration. CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Missing, malformed, or mismatched input data. CLI maps this to exit code 3.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/shape contract violation between in-process components.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Named substream derivation: stream_seed(seed, "dropout") and
// stream_seed(seed, "lambda") never collide, so adding draws to one stream
// cannot shift another.
inline uint64_t stream_seed(uint64_t seed, std::string_view name) {
  return splitmix64(seed ^ fnv1a64(name));
}

// Seeded random stream with hand-rolled distributions. std::*_distribution
// is implementation-defined, which would break the bit-determinism contract
// across standard libraries.
class RandomStream {
 public:
  RandomStream() : engine_(0) {}
  explicit RandomStream(uint64_t seed) : engine_(splitmix64(seed)) {}
  RandomStream(uint64_t seed, std::string_view name)
      : engine_(stream_seed(seed, name)) {}

  // Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n).
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return v % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller; one value per call, cached pair.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925287 * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  uint64_t raw() { return engine_(); }

  // Deterministic child stream, e.g. one per image index.
  RandomStream substream(uint64_t index) const {
    std::mt19937_64 probe = engine_;
    return RandomStream(splitmix64(probe() ^ splitmix64(index)));
  }

 private:
  std::mt19937_64 engine_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

template <class T>
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw T(msg);
}

// Shortest round-trip-exact decimal form of a double, for CSV output that
// must parse back to the identical bit pattern.
inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace branchseg
