#pragma once

#include <cmath>
#include <cstdint>

namespace facet {

// Deterministic RNG used everywhere randomness is needed. Stream splitting via
// splitmix64 lets parallel workers (bootstrap replicates, simulated plants) own
// independent substreams that do not depend on scheduling order.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : s_(seed) {
    // warm up so that small seeds diverge immediately
    for (int i = 0; i < 4; ++i) splitmix64(s_);
  }

  // substream derived from (seed, index); fully determined by both
  Rng substream(std::uint64_t index) const {
    std::uint64_t s = s_;
    std::uint64_t h = splitmix64(s) ^ (0x9e3779b97f4a7c15ull * (index + 1));
    return Rng(h);
  }

  std::uint64_t next_u64() { return splitmix64(s_); }

  double uniform() {  // (0, 1)
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {  // polar Box-Muller, one value per call (no cache)
    for (;;) {
      double u = 2.0 * uniform() - 1.0;
      double v = 2.0 * uniform() - 1.0;
      double r2 = u * u + v * v;
      if (r2 > 0.0 && r2 < 1.0)
        return u * std::sqrt(-2.0 * std::log(r2) / r2);
    }
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  // integer in [0, n)
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t s_;
};

}  // namespace facet
