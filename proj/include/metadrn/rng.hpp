#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "metadrn/common.hpp"

namespace metadrn {

// xoshiro256++ with splitmix64 seeding. Hand-rolled distributions so that
// streams are bit-reproducible across compilers and standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : state_) w = splitmix64(x);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0,1), 53-bit mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  uint64_t uniform_int(uint64_t n) {
    check_arg(n > 0, "Rng::uniform_int: n must be positive");
    uint64_t mask = ~uint64_t{0};
    if (n <= (mask / 2) + 1) {
      uint64_t limit = mask - mask % n;
      uint64_t x;
      do {
        x = next_u64();
      } while (x > limit);
      return x % n;
    }
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= n);
    return x;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller, one value per call (no cached state, keeps forks independent).
  double normal() {
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Independent child stream. Deterministic function of (state, salt) that
  // does not advance this stream.
  Rng fork(uint64_t salt) const {
    uint64_t h = 0x9e3779b97f4a7c15ull ^ salt;
    for (uint64_t w : state_) {
      h ^= w + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
      h = splitmix64_mix(h);
    }
    return Rng(h);
  }

  template <typename Vec>
  void shuffle(Vec& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    return splitmix64_mix(x);
  }

  static uint64_t splitmix64_mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::array<uint64_t, 4> state_{};
};

}  // namespace metadrn
