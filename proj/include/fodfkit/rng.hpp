#pragma once

#include <cstdint>
#include <random>

namespace fodf {

// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_seed(std::uint64_t seed) { return mix64(seed); }

template <typename... Rest>
constexpr std::uint64_t hash_seed(std::uint64_t seed, std::uint64_t next, Rest... rest) {
  return hash_seed(mix64(seed) ^ (next + 0x632BE59BD9B4E019ull), static_cast<std::uint64_t>(rest)...);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(hash_seed(seed)); }

}  // namespace fodf
