#pragma once

#include <cmath>
#include <cstdint>

namespace tfl {

/// Counter-based pseudo-random stream.
///
/// The value sequence is a pure function of (seed, stream, counter), so streams
/// can be split freely across trials/epochs without sharing state, and a given
/// (seed, counter) pair produces the same value on every platform. Distribution
/// transforms (uniform, normal, ...) are implemented here rather than with
/// <random> distributions, whose output is implementation-defined.
class RngStream {
public:
  explicit RngStream(uint64_t seed, uint64_t stream = 0)
      : base_(mix(seed ^ mix(stream + 0x9E3779B97F4A7C15ULL))), counter_(0) {}

  uint64_t next_u64() {
    ++counter_;
    return mix(base_ + 0x9E3779B97F4A7C15ULL * counter_);
  }

  /// Uniform double in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Inclusive integer range.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  /// Standard normal via Box-Muller; always consumes exactly two draws.
  double normal() {
    double u1 = 1.0 - uniform(); // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  uint64_t counter() const { return counter_; }

  /// SplitMix64 finalizer; also used to derive sub-seeds elsewhere.
  static uint64_t mix(uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }

private:
  uint64_t base_;
  uint64_t counter_;
};

} // namespace tfl
