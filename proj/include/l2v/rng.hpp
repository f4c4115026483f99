#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace l2v {

/// SplitMix64 finalizer. Bijective 64-bit mixer.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based generator: draw n of stream s under seed k is
///   splitmix64(key ^ n)   with key = splitmix64(k ^ splitmix64(s)).
/// There is no hidden state beyond (key, counter), so any draw can be
/// recomputed independently and substreams never interact.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : seed_(seed), stream_(stream), key_(splitmix64(seed ^ splitmix64(stream))) {}

  std::uint64_t next_u64() noexcept { return splitmix64(key_ ^ counter_++); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n));
  }

  /// Standard normal via Box-Muller; consumes two draws.
  double normal() noexcept {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Normal(0, std) resampled until it lies within +-2 std.
  double truncated_normal(double stddev) noexcept {
    for (;;) {
      const double z = normal();
      if (std::abs(z) <= 2.0) return z * stddev;
    }
  }

  /// Independent child stream. Does not advance this generator.
  CounterRng fork(std::uint64_t child) const noexcept {
    return CounterRng(splitmix64(seed_ ^ (stream_ * 0x632be59bd9b4e019ULL)), child);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace l2v
