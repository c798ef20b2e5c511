#pragma once
// Deterministic random streams. All randomness in the project flows from a
// single seed through named substreams, so components can be re-seeded
// independently and runs are reproducible across standard libraries
// (no std::normal_distribution, whose output is implementation-defined).

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace medvg {

class Rng {
 public:
  explicit Rng(std::uint64_t seed)
      : state_(seed ^ 0x9e3779b97f4a7c15ull), seed_origin_(seed) {
    // warm up so nearby seeds diverge
    next_u64();
    next_u64();
  }

  // Independent stream derived from this one's seed and a label.
  Rng substream(std::string_view label) const {
    std::uint64_t h = 0xcbf29ce484222325ull ^ seed_origin_;
    for (char c : label) {
      h ^= static_cast<std::uint8_t>(c);
      h *= 0x100000001b3ull;
    }
    return Rng(h);
  }

  std::uint64_t next_u64() {
    // splitmix64
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

  // standard normal via Box-Muller (both draws consumed every call)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t state_;
  std::uint64_t seed_origin_ = 0;
};

}  // namespace medvg
