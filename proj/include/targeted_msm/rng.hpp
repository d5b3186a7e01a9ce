#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace tmsm {

// splitmix64 round; used for seed mixing only.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Stream derivation: deterministic in (master, stream) and avalanching, so
// replication r always sees the same draws no matter how work is scheduled.
inline std::uint64_t mix_seed(std::uint64_t master, std::uint64_t stream) {
  std::uint64_t s = master;
  const std::uint64_t a = splitmix64(s);
  s ^= stream + 0x9E3779B97F4A7C15ull + (a << 6) + (a >> 2);
  return splitmix64(s);
}

// Deterministic generator: the engine (mt19937_64) and every variate
// transformation below are pinned by this header, not by the standard
// library's unspecified distribution algorithms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t s = seed;
    eng_.seed(splitmix64(s));
  }

  // Uniform on (0,1), 53-bit resolution, never exactly 0.
  double uniform() {
    for (;;) {
      const double u = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
      if (u > 0.0) return u;
    }
  }

  // Standard normal via the polar method; the rejection loop consumes a
  // deterministic prefix of the uniform stream.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    for (;;) {
      const double u = 2.0 * uniform() - 1.0;
      const double v = 2.0 * uniform() - 1.0;
      const double s = u * u + v * v;
      if (s > 0.0 && s < 1.0) {
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        have_spare_ = true;
        return u * f;
      }
    }
  }

  int bernoulli(double p) { return uniform() < p ? 1 : 0; }

  std::uint64_t raw() { return eng_(); }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace tmsm
