#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <type_traits>

namespace oaid {

using Rng = std::mt19937_64;

constexpr std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

namespace detail {

constexpr std::uint64_t seed_part(std::string_view s) { return fnv1a64(s); }

template <typename I>
  requires std::is_integral_v<I>
constexpr std::uint64_t seed_part(I v) {
  return static_cast<std::uint64_t>(v);
}

}  // namespace detail

// Mixes a master seed with any number of integer / string coordinates
// (source id, split, sample index, epoch, ...) into an independent stream seed.
template <typename... Parts>
constexpr std::uint64_t derive_seed(std::uint64_t master, const Parts&... parts) {
  std::uint64_t h = splitmix64(master);
  ((h = splitmix64(h ^ detail::seed_part(parts))), ...);
  return h;
}

template <typename... Parts>
Rng derive_rng(std::uint64_t master, const Parts&... parts) {
  return Rng{derive_seed(master, parts...)};
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>{lo, hi}(rng);
}

// Inclusive on both ends.
inline std::size_t uniform_index(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>{lo, hi}(rng);
}

inline bool coin(Rng& rng, double p) { return uniform(rng, 0.0, 1.0) < p; }

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  return std::normal_distribution<double>{mean, stddev}(rng);
}

}  // namespace oaid
