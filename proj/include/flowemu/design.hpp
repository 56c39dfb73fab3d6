#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include "flowemu/common.hpp"
#include "flowemu/rng.hpp"

namespace flowemu {

/// Seeded Latin hypercube on [0,1]^p: every 1-D projection puts exactly one
/// point into each of the n equal bins, uniformly placed within its bin.
inline Matrix latin_hypercube(int dims, int points, std::uint64_t seed) {
  if (dims < 1 || points < 1) throw ValidationError("latin_hypercube: dims and points must be >= 1");
  Rng rng(seed);
  Matrix design(points, dims);
  std::vector<int> order(points);
  for (int j = 0; j < dims; ++j) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (int i = 0; i < points; ++i) {
      design(i, j) = (order[i] + rng.uniform()) / points;
    }
  }
  return design;
}

namespace detail {
inline constexpr int kHaltonPrimes[] = {2,  3,  5,  7,  11, 13, 17, 19, 23, 29, 31, 37, 41,
                                        43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97};

inline double radical_inverse(std::uint64_t index, int base) {
  double inv_base = 1.0 / base;
  double factor = inv_base;
  double value = 0.0;
  while (index > 0) {
    value += static_cast<double>(index % base) * factor;
    index /= base;
    factor *= inv_base;
  }
  return value;
}
}  // namespace detail

/// Randomized low-discrepancy points on [lo, hi]^p: a Halton sequence under a
/// seeded Cranley-Patterson rotation. Used for multi-start initial points.
inline Matrix scrambled_low_discrepancy(int dims, int points, std::uint64_t seed,
                                        double lo = 0.0, double hi = 1.0) {
  constexpr int max_dims = static_cast<int>(sizeof(detail::kHaltonPrimes) / sizeof(int));
  if (dims < 1 || dims > max_dims) throw ValidationError("scrambled_low_discrepancy: unsupported dimension");
  if (points < 0) throw ValidationError("scrambled_low_discrepancy: negative point count");
  if (!(lo < hi)) throw ValidationError("scrambled_low_discrepancy: need lo < hi");
  Rng rng(seed);
  std::vector<double> shift(dims);
  for (auto& s : shift) s = rng.uniform();
  Matrix out(points, dims);
  for (int i = 0; i < points; ++i) {
    for (int j = 0; j < dims; ++j) {
      // skip index 0 so the unshifted sequence never emits an exact corner
      double u = detail::radical_inverse(static_cast<std::uint64_t>(i) + 1, detail::kHaltonPrimes[j]) + shift[j];
      u -= std::floor(u);
      out(i, j) = lo + (hi - lo) * u;
    }
  }
  return out;
}

}  // namespace flowemu
