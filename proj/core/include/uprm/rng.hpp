#pragma once

#include <cstdint>
#include <random>

namespace uprm {

/// SplitMix64 finaliser; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seed for an independent stream addressed by (seed, key, field). Streams
/// for different keys never depend on each other, so generation order does
/// not matter.
constexpr std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t key,
                                    std::uint64_t field) noexcept {
  return mix64(mix64(mix64(seed) ^ key) ^ (field * 0xD6E8FEB86659FD93ULL));
}

inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t key, std::uint64_t field) {
  return std::mt19937_64(stream_seed(seed, key, field));
}

}  // namespace uprm
