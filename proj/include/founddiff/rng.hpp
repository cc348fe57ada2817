#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace founddiff {

// Deterministic random source. All randomness in the library flows through
// instances of this class; identical seeds give identical streams of
// uniform, normal and Poisson draws on every platform.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "splitmix64/mt19937_64";

  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  std::uint64_t seed() const { return seed_; }

  // Child stream derived from (seed, id); independent of draws made so far.
  Rng fork(std::uint64_t id) const {
    return Rng(splitmix64(seed_ ^ splitmix64(id + 0x9e3779b97f4a7c15ull)));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    // Rejection-free modulo is fine at desk scale; bias < 2^-40 for n < 2^24.
    return engine_() % n;
  }

  // Standard normal via Box-Muller, one spare cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Poisson draw. Sequential-search inversion below mean 30, rounded and
  // clamped normal approximation above.
  std::uint64_t poisson(double mean) {
    if (mean <= 0.0) return 0;
    if (mean < 30.0) {
      const double l = std::exp(-mean);
      std::uint64_t k = 0;
      double p = 1.0;
      do {
        ++k;
        p *= uniform();
      } while (p > l);
      return k - 1;
    }
    const double x = mean + std::sqrt(mean) * normal();
    return x <= 0.0 ? 0 : static_cast<std::uint64_t>(std::llround(x));
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace founddiff
