#pragma once

/**
 * Splittable counter-based random number generator.
 *
 * Every run derives all of its randomness from one root seed. Substreams are
 * split off by hashing (key, tag) so that e.g. each instance, arm and rollout
 * gets an independent, reproducible stream regardless of evaluation order or
 * thread count. The output function is the splitmix64 finalizer applied to
 * key + counter * golden-gamma, which is stable across platforms (no
 * std::*_distribution involved anywhere).
 */

#include "flowcot/numerics.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace flowcot {

class Rng {
 public:
  explicit Rng(uint64_t key) : key_(key) {}

  /// Derive an independent substream. Does not disturb this stream.
  Rng split(uint64_t tag) const { return Rng(mix64(key_ ^ mix64(tag + 0x9e3779b97f4a7c15ull))); }
  Rng split(std::string_view tag) const { return split(fnv1a(tag)); }

  uint64_t next_u64() { return mix64(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

  /// Uniform double in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be positive.
  int next_int(int n) {
    if (n <= 0) throw std::invalid_argument("Rng::next_int: n must be positive");
    return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Draw an index from a normalized log-probability vector.
  /// Non-finite entries carry zero mass. Falls back to the argmax if the
  /// cumulative walk runs past the end (can happen within rounding).
  int sample_logprobs(std::span<const double> lp) {
    const double u = next_double();
    double acc = 0.0;
    for (size_t i = 0; i < lp.size(); ++i) {
      if (!std::isfinite(lp[i])) continue;
      acc += std::exp(lp[i]);
      if (u < acc) return static_cast<int>(i);
    }
    return argmax_lowest_id(lp);
  }

  uint64_t key() const { return key_; }

 private:
  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace flowcot
