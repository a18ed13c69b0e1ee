#pragma once

#include <cstdint>
#include <random>

namespace passive {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer. Stateless, so seeds can be derived in any order.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed of episode `index` under `master`: mix64(mix64(master) ^ index).
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  return mix64(mix64(master) ^ index);
}

// Independent sub-streams of one episode seed.
enum class Stream : std::uint64_t { Dag = 1, Environment = 2, Policy = 3, Goal = 4 };

inline Rng make_rng(std::uint64_t seed, Stream stream) {
  return Rng(derive_seed(seed, static_cast<std::uint64_t>(stream)));
}

}  // namespace passive
