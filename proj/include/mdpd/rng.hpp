#pragma once

// Deterministic RNG used everywhere randomness is needed (init, tasks, masks).
// Hand-rolled on purpose: std::uniform_real_distribution and friends are
// implementation-defined, and the reproducibility contract wants bit-identical
// runs for a given seed and build.

#include <cstdint>
#include <cmath>

namespace mdpd {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Derive an independent stream from a root seed and a small tag, so the
// task generator, parameter init, and mask draws never share a stream.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t tag) {
  std::uint64_t s = root ^ (0xa0761d6478bd642fULL * (tag + 1));
  splitmix64(s);
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {
    // burn a few outputs so small seeds decorrelate
    splitmix64(state_);
    splitmix64(state_);
  }

  std::uint64_t next_u64() { return splitmix64(state_); }

  // uniform in [0, 1) with 53 bits of mantissa
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller; no cached spare so the stream position is easy to reason about
  double gaussian() {
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  // uniform integer in [0, n)
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t state_;
};

}  // namespace mdpd
