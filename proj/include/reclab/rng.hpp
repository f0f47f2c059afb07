#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace reclab {

// Deterministic random source. std::mt19937_64 is fully specified by the
// standard; the distributions below are written out so streams are identical
// across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Derives an independent stream from a base seed and a list of tags
  // (step index, role, ...).
  template <typename... Tags>
  static Rng derive(std::uint64_t seed, Tags... tags) {
    std::uint64_t h = mix(seed ^ 0x9e3779b97f4a7c15ULL);
    ((h = mix(h ^ (static_cast<std::uint64_t>(tags) + 0x632be59bd9b4e019ULL))), ...);
    return Rng(h);
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  // Normal(0, stddev) truncated to +-2 stddev by resampling.
  double truncated_normal(double stddev) {
    for (;;) {
      const double z = normal();
      if (std::fabs(z) <= 2.0) return z * stddev;
    }
  }

  template <typename Container>
  void shuffle(Container& c) {
    for (std::size_t i = c.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(c[i - 1], c[j]);
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace reclab
