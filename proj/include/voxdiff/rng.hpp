#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "voxdiff/common.hpp"

namespace voxdiff {

// splitmix64 finalizer; bijective on u64.
inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// All sub-seeds derive from one root seed by hashing (component name, index),
// so results do not depend on the order components draw entropy.
inline uint64_t derive_seed(uint64_t root, std::string_view component, uint64_t index = 0) {
  uint64_t h = 0xcbf29ce484222325ull ^ root;
  for (char c : component) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001b3ull;
  }
  return mix64(mix64(h) + index);
}

// Counter-based generator: the stream is a pure function of (key, counter),
// so per-position / per-sample draws are independent of any parallel split.
class Rng {
 public:
  explicit Rng(uint64_t key, uint64_t counter = 0) : key_(key), counter_(counter) {}

  uint64_t next_u64() { return mix64(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  uint64_t below(uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Index into an unnormalized non-negative weight vector.
  size_t categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = uniform() * total;
    double acc = 0.0;
    for (size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return i;
    }
    return weights.size() - 1;
  }

  uint64_t key() const { return key_; }
  uint64_t counter() const { return counter_; }

 private:
  uint64_t key_;
  uint64_t counter_;
};

}  // namespace voxdiff
