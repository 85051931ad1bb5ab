#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace histodistill {

// Seeded random stream with portable uniform/normal draws. The standard
// <random> distributions are implementation-defined, so the draws here are
// spelled out explicitly: results are stable for a given seed across
// standard library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return (gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling keeps the draw exactly
  // uniform for any n.
  int64_t uniform_int(int64_t n) {
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return static_cast<int64_t>(x % un);
  }

  // Standard normal via Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Independent child stream; advances this stream by one draw.
  Rng fork() {
    uint64_t s = gen_();
    // splitmix64 finalizer decorrelates the child from the raw draw.
    s += 0x9e3779b97f4a7c15ULL;
    s = (s ^ (s >> 30)) * 0xbf58476d1ce4e5b9ULL;
    s = (s ^ (s >> 27)) * 0x94d049bb133111ebULL;
    return Rng(s ^ (s >> 31));
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace histodistill
