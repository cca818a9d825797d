#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace pixelseg {

// Deterministic random source. All distribution transforms are hand-rolled on
// top of mt19937_64 so streams are identical across standard libraries and
// across runs with the same seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), n >= 1. Rejection-free modulo is fine here:
  // n is tiny compared to 2^64, bias is unobservable at our sample counts.
  std::uint64_t uniform_index(std::uint64_t n) { return gen_() % n; }

  // Standard normal via Box-Muller; caches the second value.
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double gaussian(double mean, double sigma) { return mean + sigma * gaussian(); }

  bool coin() { return (gen_() & 1u) != 0u; }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace pixelseg
