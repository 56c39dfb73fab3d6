#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "flowemu/common.hpp"

namespace flowemu {

/// Injector geometry. Lengths in mm, the injection angle in degrees. The
/// extents bound the downstream block of the computational domain; when left
/// unset they are filled in from the grid bounding box.
struct GeometryParams {
  double length = 0.0;           // L: head end to nozzle exit
  double nozzle_radius = 0.0;    // R_n
  double inlet_diameter = 0.0;   // delta
  double injection_angle = 0.0;  // theta
  double inlet_distance = 0.0;   // dL: head end to inlet center
  double x_extent = std::numeric_limits<double>::quiet_NaN();  // X_max
  double y_extent = std::numeric_limits<double>::quiet_NaN();  // Y_max

  bool has_extents() const { return std::isfinite(x_extent) && std::isfinite(y_extent); }
};

/// Catalog ranges for the five design parameters (the span the emulator is
/// meant to cover). validate() enforces them only when asked; the hard
/// requirements are positivity and inlet_distance < length.
struct ParameterRanges {
  double length_min = 20.0, length_max = 100.0;
  double nozzle_radius_min = 2.0, nozzle_radius_max = 5.0;
  double inlet_diameter_min = 0.5, inlet_diameter_max = 2.0;
  double injection_angle_min = 45.0, injection_angle_max = 75.0;
  double inlet_distance_min = 1.0, inlet_distance_max = 4.0;
};

inline void validate(const GeometryParams& g, bool enforce_catalog_ranges = false,
                     const ParameterRanges& ranges = {}) {
  auto fail = [](const std::string& what) { throw ValidationError("geometry: " + what); };
  if (!(g.length > 0.0) || !(g.nozzle_radius > 0.0) || !(g.inlet_diameter > 0.0) ||
      !(g.injection_angle > 0.0) || !(g.inlet_distance > 0.0)) {
    fail("all five parameters must be positive");
  }
  if (!(g.inlet_distance < g.length)) fail("inlet_distance must be smaller than length");
  if (std::isfinite(g.x_extent) && !(g.x_extent > g.length)) fail("x_extent must exceed length");
  if (std::isfinite(g.y_extent) && !(g.y_extent > g.nozzle_radius)) fail("y_extent must exceed nozzle_radius");
  if (enforce_catalog_ranges) {
    auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
    if (!in(g.length, ranges.length_min, ranges.length_max)) fail("length outside catalog range");
    if (!in(g.nozzle_radius, ranges.nozzle_radius_min, ranges.nozzle_radius_max))
      fail("nozzle_radius outside catalog range");
    if (!in(g.inlet_diameter, ranges.inlet_diameter_min, ranges.inlet_diameter_max))
      fail("inlet_diameter outside catalog range");
    if (!in(g.injection_angle, ranges.injection_angle_min, ranges.injection_angle_max))
      fail("injection_angle outside catalog range");
    if (!in(g.inlet_distance, ranges.inlet_distance_min, ranges.inlet_distance_max))
      fail("inlet_distance outside catalog range");
  }
}

/// Unstructured planar grid; row j of points is (x_j, y_j) in mm.
struct Grid {
  Matrix points;  // J x 2

  int size() const { return static_cast<int>(points.rows()); }
  double x(int j) const { return points(j, 0); }
  double y(int j) const { return points(j, 1); }
};

/// J >= 1, all coordinates finite, and no two points closer than 1e-12 mm.
inline void validate(const Grid& grid) {
  const int n = grid.size();
  if (n < 1 || grid.points.cols() != 2) throw ValidationError("grid: need at least one (x, y) point");
  if (!grid.points.allFinite()) throw ValidationError("grid: coordinates must be finite");
  // near-duplicate scan over x-sorted order; only points with almost equal x
  // can collide, so the window stays short
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return grid.x(a) < grid.x(b); });
  constexpr double tol = 1e-12;
  for (int a = 0; a < n; ++a) {
    for (int b = a + 1; b < n; ++b) {
      const int i = order[a], j = order[b];
      if (grid.x(j) - grid.x(i) > tol) break;
      if (std::fabs(grid.y(j) - grid.y(i)) <= tol && std::fabs(grid.x(j) - grid.x(i)) <= tol) {
        throw ValidationError("grid: duplicate points at row " + std::to_string(i) + " and row " +
                              std::to_string(j));
      }
    }
  }
}

inline GeometryParams with_extents_from(GeometryParams g, const Grid& grid) {
  if (!std::isfinite(g.x_extent)) g.x_extent = grid.points.col(0).maxCoeff();
  if (!std::isfinite(g.y_extent)) g.y_extent = grid.points.col(1).maxCoeff();
  return g;
}

/// The four zones of the domain. Indexed in this order; points on a shared
/// boundary belong to the lower-indexed zone, and the downstream split puts
/// y == nozzle_radius into DownstreamBottom (top is strictly above the lip).
enum class Region : int {
  HeadEndToInlet = 0,   // 0 <= x <= inlet_distance
  InletToExit = 1,      // inlet_distance < x <= length
  DownstreamTop = 2,    // x > length, y > nozzle_radius
  DownstreamBottom = 3  // x > length, y <= nozzle_radius
};

constexpr int kRegionCount = 4;

inline const char* region_name(Region r) {
  switch (r) {
    case Region::HeadEndToInlet: return "head_end_to_inlet";
    case Region::InletToExit: return "inlet_to_exit";
    case Region::DownstreamTop: return "downstream_top";
    case Region::DownstreamBottom: return "downstream_bottom";
  }
  return "?";
}

inline Region classify_point(double x, double y, const GeometryParams& g) {
  if (x < 0.0 || y < 0.0) {
    throw ValidationError("partition: point (" + std::to_string(x) + ", " + std::to_string(y) +
                          ") lies outside the domain (negative coordinate)");
  }
  if (x <= g.inlet_distance) return Region::HeadEndToInlet;
  if (x <= g.length) return Region::InletToExit;
  return y > g.nozzle_radius ? Region::DownstreamTop : Region::DownstreamBottom;
}

inline std::vector<Region> partition_grid(const Grid& grid, const GeometryParams& g) {
  validate(grid);
  validate(g);
  std::vector<Region> labels(grid.size());
  for (int j = 0; j < grid.size(); ++j) labels[j] = classify_point(grid.x(j), grid.y(j), g);
  return labels;
}

/// Region-wise affine rescaling from one geometry onto another. Axis scales
/// per region keep the zone boundaries (inlet station, nozzle exit, lip line)
/// aligned, so the map is continuous across them and composes with its
/// inverse to the identity.
class PiecewiseAffineMap {
 public:
  struct Affine {
    double sx = 1.0, ox = 0.0;
    double sy = 1.0, oy = 0.0;
  };

  static PiecewiseAffineMap between(const GeometryParams& src, const GeometryParams& ref) {
    validate(src);
    validate(ref);
    check_nondegenerate(src, "source");
    check_nondegenerate(ref, "reference");

    PiecewiseAffineMap map;
    map.src_ = src;
    map.ref_ = ref;

    const double sx_inlet = ref.inlet_distance / src.inlet_distance;
    const double sx_exit =
        (ref.length - ref.inlet_distance) / (src.length - src.inlet_distance);
    const double sx_down = (ref.x_extent - ref.length) / (src.x_extent - src.length);
    const double sy_core = ref.nozzle_radius / src.nozzle_radius;
    const double sy_top = (ref.y_extent - ref.nozzle_radius) / (src.y_extent - src.nozzle_radius);

    auto& zones = map.zones_;
    zones[0] = {sx_inlet, 0.0, sy_core, 0.0};
    zones[1] = {sx_exit, ref.inlet_distance - src.inlet_distance * sx_exit, sy_core, 0.0};
    zones[2] = {sx_down, ref.length - src.length * sx_down, sy_top,
                ref.nozzle_radius - src.nozzle_radius * sy_top};
    zones[3] = {sx_down, ref.length - src.length * sx_down, sy_core, 0.0};
    return map;
  }

  Eigen::Vector2d apply(double x, double y) const {
    const Affine& a = zones_[static_cast<int>(classify_point(x, y, src_))];
    return {a.sx * x + a.ox, a.sy * y + a.oy};
  }

  Grid apply(const Grid& grid) const {
    Grid out;
    out.points.resize(grid.points.rows(), 2);
    for (int j = 0; j < grid.size(); ++j) {
      out.points.row(j) = apply(grid.x(j), grid.y(j)).transpose();
    }
    return out;
  }

  PiecewiseAffineMap inverse() const { return between(ref_, src_); }

  const GeometryParams& source() const { return src_; }
  const GeometryParams& reference() const { return ref_; }
  const Affine& zone(Region r) const { return zones_[static_cast<int>(r)]; }

 private:
  static void check_nondegenerate(const GeometryParams& g, const char* role) {
    auto fail = [&](const std::string& what) {
      throw ValidationError(std::string("rescale map: degenerate ") + role + " geometry (" + what + ")");
    };
    if (!g.has_extents()) fail("extents unset; derive them from the grid bounding box first");
    if (!(g.inlet_distance > 0.0)) fail("zero-length head-end zone");
    if (!(g.length - g.inlet_distance > 0.0)) fail("zero-length inlet-to-exit zone");
    if (!(g.x_extent - g.length > 0.0)) fail("zero-length downstream zone");
    if (!(g.nozzle_radius > 0.0)) fail("zero-height core zone");
    if (!(g.y_extent - g.nozzle_radius > 0.0)) fail("zero-height downstream-top zone");
  }

  std::array<Affine, kRegionCount> zones_;
  GeometryParams src_, ref_;
};

inline PiecewiseAffineMap build_rescale_map(const GeometryParams& src, const GeometryParams& ref) {
  return PiecewiseAffineMap::between(src, ref);
}

}  // namespace flowemu
