#pragma once

#include <cstdint>
#include <random>

namespace mlbss {

// splitmix64 finalizer; decorrelates nearby seeds and stream ids.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent generator for (seed, stream). Restarts, replications and
// generator sub-streams each get their own stream id, so work items can be
// scheduled in any order (or concurrently) without changing the draws.
inline std::mt19937_64 seeded_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  const std::uint64_t s = splitmix64(seed) ^ splitmix64(0xa02bdbf7bb3c0a7ULL * (stream + 1));
  return std::mt19937_64(splitmix64(s));
}

}  // namespace mlbss
