#pragma once

#include <cmath>
#include <cstdint>

namespace concatlab {

// Deterministic, portable RNG: splitmix64 core, Box-Muller normals.
// Streams derived via derive_seed are order-independent, which keeps
// per-image generation reproducible regardless of generation order.
inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed ^ (0xA24BAED4963EE407ULL + stream * 0x9E3779B97F4A7C15ULL);
  return splitmix64_next(s);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() { return splitmix64_next(state_); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; one fresh pair of uniforms per call so the
  // stream is call-pattern independent.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1ULL;
    const std::uint64_t r = static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next()) * range) >> 64);
    return lo + static_cast<std::int64_t>(r);
  }

  Rng fork(std::uint64_t stream) const { return Rng(derive_seed(state_, stream)); }

 private:
  std::uint64_t state_;
};

}  // namespace concatlab
