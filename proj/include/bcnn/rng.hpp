#pragma once

// Platform-independent random helpers. std::mt19937_64 is fully specified by
// the standard, but the std distributions and std::shuffle are not, so every
// draw that feeds a reproducible artifact goes through these functions.

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace bcnn {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; derives independent stream seeds from one user seed.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Stream ids, so that init, shuffling and synthesis never share draws.
enum class Stream : std::uint64_t { kInit = 1, kShuffle = 2, kSplit = 3, kSynth = 4, kBench = 5 };

inline Rng make_rng(std::uint64_t seed, Stream stream) {
  return Rng(mix_seed(seed, static_cast<std::uint64_t>(stream)));
}

/// Uniform in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

/// Unbiased integer in [0, n) by rejection.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_index(rng, i));
    std::swap(v[i - 1], v[j]);
  }
}

inline std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  shuffle(p, rng);
  return p;
}

}  // namespace bcnn
