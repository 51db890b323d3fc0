// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace cdmask {

/// Seeded RNG wrapper used everywhere randomness appears, so that a single
/// integer seed pins initialization, data order, and augmentation.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  double uniform(double a, double b) {
    std::uniform_real_distribution<double> d(a, b);
    return d(gen_);
  }

  double normal(double mean, double stddev) {
    std::normal_distribution<double> d(mean, stddev);
    return d(gen_);
  }

  /// Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    std::uniform_int_distribution<int> d(lo, hi);
    return d(gen_);
  }

  bool bernoulli(double p) {
    std::bernoulli_distribution d(p);
    return d(gen_);
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

/// FNV-1a over a string, folded with a base seed. Used to derive per-sample
/// seeds that are stable across platforms and worker counts.
inline uint64_t derive_seed(uint64_t base, const std::string& key) {
  uint64_t h = 14695981039346656037ULL ^ base;
  for (unsigned char c : key) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace cdmask
