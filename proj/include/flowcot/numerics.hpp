#pragma once

/**
 * Log-domain arithmetic and hashing primitives shared by every module.
 *
 * All probability math in this library runs in the log domain. Probabilities
 * below exp(kLogFloor) are clamped when forming ratios; exact oracles treat
 * the floor as an error instead (see oracle.hpp).
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string_view>
#include <vector>

namespace flowcot {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Clamp floor for log-probabilities entering ratios: exp(-60) ~ 8.8e-27.
inline constexpr double kLogFloor = -60.0;

/// Tolerance for "this log-prob vector is normalized" checks.
inline constexpr double kNormTol = 1e-9;

/// Numerically stable log(sum(exp(x_i))). Empty or all -inf input -> -inf.
inline double log_sum_exp(std::span<const double> xs) {
  double m = kNegInf;
  for (double x : xs) m = std::max(m, x);
  if (!std::isfinite(m)) return kNegInf;
  double s = 0.0;
  for (double x : xs) {
    if (std::isfinite(x)) s += std::exp(x - m);
  }
  return m + std::log(s);
}

/// Normalize raw logits into log-probabilities in place (LSE subtraction).
inline void normalize_logits(std::vector<double>& logits) {
  const double z = log_sum_exp(logits);
  for (double& x : logits) {
    if (std::isfinite(x)) x -= z;
  }
}

/// True when |log_sum_exp(lp)| <= tol.
inline bool is_normalized(std::span<const double> lp, double tol = kNormTol) {
  return std::abs(log_sum_exp(lp)) <= tol;
}

/// KL(p || q) from two log-prob vectors over the same support.
/// Entries with p == 0 contribute nothing; p > 0 against q == 0 -> +inf.
inline double kl_divergence(std::span<const double> lp, std::span<const double> lq) {
  double kl = 0.0;
  for (size_t i = 0; i < lp.size(); ++i) {
    if (!std::isfinite(lp[i])) continue;
    const double p = std::exp(lp[i]);
    if (p == 0.0) continue;
    if (!std::isfinite(lq[i])) return std::numeric_limits<double>::infinity();
    kl += p * (lp[i] - lq[i]);
  }
  return kl;
}

/// Index of the maximum entry; ties broken by lowest index. -inf-only -> -1.
inline int argmax_lowest_id(std::span<const double> xs) {
  int best = -1;
  double best_v = kNegInf;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (std::isfinite(xs[i]) && xs[i] > best_v) {
      best_v = xs[i];
      best = static_cast<int>(i);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Hashing (FNV-1a). Used for task ids, config hashes and RNG stream keys.
// ---------------------------------------------------------------------------

inline constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ull;
inline constexpr uint64_t kFnvPrime = 0x100000001b3ull;

inline uint64_t fnv1a(std::string_view bytes, uint64_t h = kFnvOffset) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

inline uint64_t fnv1a_u64(uint64_t x, uint64_t h = kFnvOffset) {
  for (int i = 0; i < 8; ++i) {
    h ^= (x >> (8 * i)) & 0xff;
    h *= kFnvPrime;
  }
  return h;
}

/// Final avalanche of splitmix64; good bit diffusion for derived keys.
inline uint64_t mix64(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace flowcot
