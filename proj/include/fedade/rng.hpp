#pragma once

#include <cstdint>
#include <random>

namespace fedade {

using Rng = std::mt19937_64;

/// splitmix64 finalizer.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed of an independent stream, e.g. one per client.
inline std::uint64_t derive_seed(std::uint64_t global_seed, std::uint64_t stream_id) {
  return mix64(mix64(global_seed) ^ mix64(stream_id + 0x5851f42d4c957f2dULL));
}

inline Rng make_rng(std::uint64_t global_seed, std::uint64_t stream_id) {
  return Rng(derive_seed(global_seed, stream_id));
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline double std_normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

}  // namespace fedade
