#pragma once

#include <cstdint>
#include <random>

#include "graphem/linalg.hpp"

namespace graphem {

/// All sampling uses std::mt19937_64 with std::normal_distribution. Streams
/// are reproducible within a build; the normal sampler is implementation
/// defined, so values may differ across standard libraries.
using Rng = std::mt19937_64;

/// SplitMix64 finalizer.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seed for job `job` under master seed `master`. Independent of how many
/// jobs run or in which order.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t job) noexcept {
  return splitmix64(master ^ splitmix64(job));
}

/// rows x cols standard normal draws, filled column by column.
inline Matrix standard_normal(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix out(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) out(i, j) = normal(rng);
  return out;
}

}  // namespace graphem
