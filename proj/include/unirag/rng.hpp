#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

#include "unirag/hashing.hpp"

namespace unirag {

// Deterministic RNG (splitmix64 stream + Box-Muller normals). Hand-rolled so
// that draws are bit-identical across standard libraries; std::*_distribution
// does not guarantee that.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  Rng(std::uint64_t seed, std::string_view tag) : state_(seed_mix(seed, tag)) {}

  Rng(std::uint64_t seed, std::string_view tag, std::uint64_t extra)
      : state_(seed_mix(seed, tag, extra)) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  // Uniform in (0, 1]; never returns 0 so logs stay finite.
  double next_unit() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t next_below(std::uint64_t n) {
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = ~0ull - (~0ull % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  double next_gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = next_unit();
    const double u2 = next_unit();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    const double ang = 2.0 * std::numbers::pi * u2;
    spare_ = mag * std::sin(ang);
    have_spare_ = true;
    return mag * std::cos(ang);
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace unirag
