#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "flowemu/common.hpp"
#include "flowemu/geometry.hpp"
#include "flowemu/parallel.hpp"

namespace flowemu {

/// Precomputed inverse-distance-squared stencil from a source grid onto query
/// points. Weights depend only on the two grids, so one plan serves every
/// snapshot and variable interpolated between them.
struct IdwPlan {
  Eigen::MatrixXi neighbors;  // k x Jq source row indices, ascending (d^2, index)
  Matrix weights;             // k x Jq, columns sum to 1; exact hits collapse to one entry

  int neighbor_count() const { return static_cast<int>(neighbors.rows()); }
  int query_count() const { return static_cast<int>(neighbors.cols()); }
};

/// Squared distance below which a query is served the source value verbatim
/// (1e-12 mm exact-hit radius).
constexpr double kIdwExactHitSquared = 1e-24;

inline IdwPlan build_idw_plan(const Grid& source, const Grid& query, int k = 10,
                              unsigned threads = 1) {
  const int n_src = source.size();
  const int n_query = query.size();
  if (n_src < 1) throw ValidationError("idw: empty source grid");
  if (k < 1) throw ValidationError("idw: neighbor count must be positive");
  if (k > n_src) {
    throw ValidationError("idw: neighbor count " + std::to_string(k) + " exceeds source size " +
                          std::to_string(n_src));
  }

  IdwPlan plan;
  plan.neighbors.setZero(k, n_query);
  plan.weights.setZero(k, n_query);

  parallel_for(static_cast<std::size_t>(n_query), threads, [&](std::size_t q) {
    const double qx = query.x(static_cast<int>(q));
    const double qy = query.y(static_cast<int>(q));
    std::vector<std::pair<double, int>> dist(n_src);
    for (int s = 0; s < n_src; ++s) {
      const double dx = source.x(s) - qx;
      const double dy = source.y(s) - qy;
      dist[s] = {dx * dx + dy * dy, s};
    }
    std::nth_element(dist.begin(), dist.begin() + (k - 1), dist.end());
    std::sort(dist.begin(), dist.begin() + k);  // fixed accumulation order

    if (dist[0].first < kIdwExactHitSquared) {
      // ties inside the hit radius resolve to the lowest source index
      int hit = dist[0].second;
      for (int i = 1; i < k && dist[i].first < kIdwExactHitSquared; ++i) {
        hit = std::min(hit, dist[i].second);
      }
      plan.neighbors.col(q).setConstant(hit);
      plan.weights(0, q) = 1.0;
      return;
    }

    double total = 0.0;
    for (int i = 0; i < k; ++i) {
      plan.neighbors(i, q) = dist[i].second;
      const double w = 1.0 / dist[i].first;
      plan.weights(i, q) = w;
      total += w;
    }
    plan.weights.col(q) /= total;
  });
  return plan;
}

inline Vector apply_idw_plan(const IdwPlan& plan, const Vector& source_values) {
  Vector out(plan.query_count());
  for (int q = 0; q < plan.query_count(); ++q) {
    double acc = 0.0;
    for (int i = 0; i < plan.neighbor_count(); ++i) {
      acc += plan.weights(i, q) * source_values(plan.neighbors(i, q));
    }
    out(q) = acc;
  }
  return out;
}

/// One-shot inverse-distance interpolation; see build_idw_plan for the rules.
inline Vector idw_interpolate(const Grid& source, const Vector& values, const Grid& query,
                              int k = 10) {
  if (values.size() != source.size()) {
    throw ValidationError("idw: value count does not match source grid size");
  }
  if (!values.allFinite()) throw ValidationError("idw: source values must be finite");
  return apply_idw_plan(build_idw_plan(source, query, k), values);
}

}  // namespace flowemu
