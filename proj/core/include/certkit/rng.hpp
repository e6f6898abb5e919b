#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "certkit/errors.hpp"
#include "certkit/tensor.hpp"

namespace certkit {

// Deterministic random source.  All distributions are derived from the raw
// mt19937_64 stream with fixed arithmetic (53-bit uniform, Box-Muller pairs),
// so sequences are bit-identical across platforms and standard libraries.
class SeededRng {
 public:
  explicit SeededRng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform double in [0, 1) with 53 random bits.
  double next_uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; generates pairs and caches the spare.
  double next_gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - next_uniform();  // (0, 1], keeps log finite
    const double u2 = next_uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n) without modulo bias.
  int64_t next_index(int64_t n) {
    if (n <= 0) throw ArgumentError("next_index: n must be positive");
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return static_cast<int64_t>(x % un);
  }

  // One draw per element, row-major order.
  template <class T>
  Tensor<T> gaussian(Shape shape, T mean, T stddev) {
    if (!(static_cast<double>(stddev) >= 0.0)) throw ArgumentError("gaussian: stddev must be >= 0");
    Tensor<T> t(std::move(shape));
    T* p = t.data();
    for (int64_t i = 0; i < t.size(); ++i)
      p[i] = mean + stddev * static_cast<T>(next_gaussian());
    return t;
  }

  template <class T>
  Tensor<T> uniform(Shape shape, T lo, T hi) {
    if (!(lo <= hi)) throw ArgumentError("uniform: lo must be <= hi");
    Tensor<T> t(std::move(shape));
    T* p = t.data();
    const T span = hi - lo;
    for (int64_t i = 0; i < t.size(); ++i)
      p[i] = lo + span * static_cast<T>(next_uniform());
    return t;
  }

  // Fisher-Yates permutation of 0..n-1.
  std::vector<int64_t> permutation(int64_t n) {
    std::vector<int64_t> p(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
    for (int64_t i = n - 1; i > 0; --i) {
      int64_t j = next_index(i + 1);
      std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]);
    }
    return p;
  }

  // Mixes a base seed with a stream index (epoch, arm, trial) into a fresh
  // seed; splitmix64 finalizer.
  static uint64_t mix(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace certkit
