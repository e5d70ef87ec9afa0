#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace qfilter {

using RandomStream = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent sub-seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Per-trajectory stream derived only from (master seed, trajectory index, salt).
/// Results therefore never depend on how trajectories are scheduled.
inline RandomStream make_stream(std::uint64_t master_seed, std::uint64_t index, std::uint64_t salt = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(master_seed), static_cast<std::uint32_t>(master_seed >> 32),
                    static_cast<std::uint32_t>(index),       static_cast<std::uint32_t>(index >> 32),
                    static_cast<std::uint32_t>(salt),        static_cast<std::uint32_t>(salt >> 32)};
  return RandomStream(seq);
}

/// One Wiener increment dW ~ N(0, dt).
inline double sample_wiener(RandomStream& rng, double dt) {
  std::normal_distribution<double> normal(0.0, std::sqrt(dt));
  return normal(rng);
}

inline double sample_uniform(RandomStream& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

}  // namespace qfilter
