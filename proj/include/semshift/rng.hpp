#pragma once

#include <cstdint>

namespace semshift {

/// splitmix64 finalizer.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a stream key.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t key) {
  return splitmix64(seed ^ splitmix64(key + 0x632BE59BD9B4E019ULL));
}

}  // namespace semshift
