#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace fvit {

/// Seeded random source. Only the raw mt19937_64 stream is used (its output
/// is fixed by the standard), and every distribution is derived here, so a
/// seed reproduces the same draws on any conforming toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (no cached second variate).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Normal(0, std) resampled until |x| <= 2*std.
  double truncated_normal(double std) {
    double x;
    do {
      x = normal();
    } while (std::abs(x) > 2.0);
    return x * std;
  }

  /// Independent child stream, e.g. one per epoch.
  Rng split(std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(engine_() >> 32), static_cast<std::uint32_t>(stream),
                      static_cast<std::uint32_t>(stream >> 32)};
    Rng child;
    child.engine_.seed(seq);
    return child;
  }

  /// Deterministic stream derived from (seed, stream) without consuming state.
  static Rng derive(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    Rng r;
    r.engine_.seed(seq);
    return r;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace fvit
