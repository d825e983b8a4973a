#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace dsnet {

/// Deterministic SplitMix64 stream.
///
/// state += 0x9E3779B97F4A7C15, then the output is mixed with the two
/// multiplier/xor-shift rounds of Steele et al. Derived draws:
///   uniform()      top 53 bits scaled by 2^-53, in [0, 1)
///   below(n)       next_u64() % n
///   normal()       Box-Muller on two uniforms, cosine branch only
/// Identical seeds and call sequences give identical streams on every
/// platform (apart from libm rounding in normal()).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), state_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t state() const { return state_; }

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  /// Uniform integer in the closed range [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Independent child stream; does not advance this generator's draws
  /// beyond one value.
  Rng fork() { return Rng(next_u64()); }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
};

}  // namespace dsnet
