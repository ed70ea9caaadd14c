#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace dowser {

// splitmix64 finalizer. All seed derivation in the project goes through
// mix64 so that adding a consumer of one stream never perturbs another.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent child seed from (parent seed, stream index).
inline std::uint64_t mix64(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ (splitmix64(stream) + 0x9e3779b97f4a7c15ULL));
}

// mt19937_64 with hand-rolled variate transforms. The engine is fully
// specified by the standard; std:: distributions are not, so we avoid them
// to keep every seeded result identical across standard libraries.
class rng {
 public:
  explicit rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double next_double() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  // Standard normal via Box-Muller with a cached spare.
  double next_normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = next_double();
    } while (u1 <= 0.0);
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // +1 or -1 with equal probability.
  double next_rademacher() { return (engine_() & 1ULL) ? 1.0 : -1.0; }

  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) {
    // Rejection sampling keeps the draw exactly uniform.
    const std::uint64_t limit = ~0ULL - (~0ULL % n);
    std::uint64_t x = 0;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace dowser
