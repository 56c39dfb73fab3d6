#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "flowemu/geometry.hpp"
#include "flowemu/rng.hpp"

using namespace flowemu;

namespace {

GeometryParams wide() {
  GeometryParams g;
  g.length = 40.0;
  g.nozzle_radius = 4.0;
  g.inlet_diameter = 1.5;
  g.injection_angle = 60.0;
  g.inlet_distance = 2.0;
  g.x_extent = 60.0;
  g.y_extent = 12.0;
  return g;
}

GeometryParams narrow() {
  GeometryParams g;
  g.length = 22.0;
  g.nozzle_radius = 3.215;
  g.inlet_diameter = 0.576;
  g.injection_angle = 58.217;
  g.inlet_distance = 3.417;
  g.x_extent = 33.0;
  g.y_extent = 10.0;
  return g;
}

}  // namespace

TEST_CASE("geometry validation", "[geometry]") {
  GeometryParams g = wide();
  REQUIRE_NOTHROW(validate(g));

  g.inlet_distance = 45.0;  // >= length
  REQUIRE_THROWS_AS(validate(g), ValidationError);

  g = wide();
  g.nozzle_radius = -1.0;
  REQUIRE_THROWS_AS(validate(g), ValidationError);

  g = wide();
  REQUIRE_NOTHROW(validate(g, true));
  g.length = 150.0;  // catalog allows up to 100
  g.x_extent = 200.0;  // keep the extent invariant satisfied
  REQUIRE_THROWS_AS(validate(g, true), ValidationError);
  REQUIRE_NOTHROW(validate(g, false));

  g = wide();
  g.x_extent = g.length;  // extents must clear the zone boundaries
  REQUIRE_THROWS_AS(validate(g), ValidationError);
}

TEST_CASE("partition assigns zones with boundary points going downward", "[geometry]") {
  const GeometryParams g = narrow();
  REQUIRE(classify_point(g.inlet_distance, 1.0, g) == Region::HeadEndToInlet);
  REQUIRE(classify_point(g.inlet_distance + 1e-12, 1.0, g) == Region::InletToExit);
  REQUIRE(classify_point(g.length, 2.0, g) == Region::InletToExit);
  REQUIRE(classify_point(g.length + 0.5, g.nozzle_radius + 0.1, g) == Region::DownstreamTop);
  // the lip line itself belongs to the bottom zone: top is strictly above it
  REQUIRE(classify_point(g.length + 0.5, g.nozzle_radius, g) == Region::DownstreamBottom);
  REQUIRE(classify_point(0.0, 0.0, g) == Region::HeadEndToInlet);

  REQUIRE_THROWS_AS(classify_point(-0.1, 1.0, g), ValidationError);
  REQUIRE_THROWS_AS(classify_point(1.0, -0.1, g), ValidationError);
}

TEST_CASE("grid validation finds duplicates and bad values", "[geometry]") {
  Grid grid;
  grid.points.resize(3, 2);
  grid.points << 0.0, 0.0, 1.0, 1.0, 1.0, 1.0;
  REQUIRE_THROWS_AS(validate(grid), ValidationError);

  grid.points(2, 0) = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(validate(grid), ValidationError);

  grid.points(2, 0) = 2.0;
  REQUIRE_NOTHROW(validate(grid));

  Grid empty;
  empty.points.resize(0, 2);
  REQUIRE_THROWS_AS(validate(empty), ValidationError);
}

TEST_CASE("rescale map between identical geometries is the identity", "[geometry]") {
  const GeometryParams g = wide();
  const PiecewiseAffineMap map = build_rescale_map(g, g);
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const double x = rng.uniform(0.0, g.x_extent);
    const double y = rng.uniform(0.0, g.y_extent);
    const auto q = map.apply(x, y);
    REQUIRE(q(0) == x);
    REQUIRE(q(1) == y);
  }
}

TEST_CASE("rescale map applies the documented per-zone scales", "[geometry]") {
  const GeometryParams s = wide(), r = narrow();
  const PiecewiseAffineMap map = build_rescale_map(s, r);

  // head end zone: pure scaling by the inlet-distance ratio
  auto a = map.apply(1.0, 2.0);
  REQUIRE(a(0) == Catch::Approx(1.0 * r.inlet_distance / s.inlet_distance).epsilon(1e-14));
  REQUIRE(a(1) == Catch::Approx(2.0 * r.nozzle_radius / s.nozzle_radius).epsilon(1e-14));

  // inlet-to-exit zone: offset so the inlet stations coincide
  const double sx_b = (r.length - r.inlet_distance) / (s.length - s.inlet_distance);
  auto b = map.apply(10.0, 3.0);
  REQUIRE(b(0) == Catch::Approx(r.inlet_distance + (10.0 - s.inlet_distance) * sx_b).epsilon(1e-14));

  // downstream, above the lip: both axes use the downstream extents
  const double sx_d = (r.x_extent - r.length) / (s.x_extent - s.length);
  const double sy_t = (r.y_extent - r.nozzle_radius) / (s.y_extent - s.nozzle_radius);
  auto c = map.apply(50.0, 9.0);
  REQUIRE(c(0) == Catch::Approx(r.length + (50.0 - s.length) * sx_d).epsilon(1e-14));
  REQUIRE(c(1) == Catch::Approx(r.nozzle_radius + (9.0 - s.nozzle_radius) * sy_t).epsilon(1e-14));

  // downstream, below the lip: core y-scaling
  auto d = map.apply(50.0, 2.0);
  REQUIRE(d(1) == Catch::Approx(2.0 * r.nozzle_radius / s.nozzle_radius).epsilon(1e-14));
}

TEST_CASE("rescale map is continuous across zone boundaries", "[geometry]") {
  const GeometryParams s = wide(), r = narrow();
  const PiecewiseAffineMap map = build_rescale_map(s, r);
  const double eps = 1e-9;

  auto near = [&](Eigen::Vector2d u, Eigen::Vector2d v) {
    REQUIRE((u - v).norm() < 1e-6);
  };
  near(map.apply(s.inlet_distance, 1.0), map.apply(s.inlet_distance + eps, 1.0));
  near(map.apply(s.length, 1.0), map.apply(s.length + eps, 1.0));
  near(map.apply(s.length + 5.0, s.nozzle_radius), map.apply(s.length + 5.0, s.nozzle_radius + eps));

  // the inlet station and the nozzle exit land exactly on their counterparts
  REQUIRE(map.apply(s.inlet_distance, 0.0)(0) == Catch::Approx(r.inlet_distance).epsilon(1e-14));
  REQUIRE(map.apply(s.length, 0.0)(0) == Catch::Approx(r.length).epsilon(1e-14));
  REQUIRE(map.apply(s.length + 1.0, s.nozzle_radius)(1) == Catch::Approx(r.nozzle_radius).epsilon(1e-14));
}

TEST_CASE("rescale map inverse composes to the identity", "[geometry]") {
  const GeometryParams s = wide(), r = narrow();
  const PiecewiseAffineMap fwd = build_rescale_map(s, r);
  const PiecewiseAffineMap bwd = fwd.inverse();
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.uniform(0.0, s.x_extent);
    const double y = rng.uniform(0.0, s.y_extent);
    const auto round_trip = bwd.apply(fwd.apply(x, y)(0), fwd.apply(x, y)(1));
    REQUIRE(round_trip(0) == Catch::Approx(x).margin(1e-10));
    REQUIRE(round_trip(1) == Catch::Approx(y).margin(1e-10));
  }
}

TEST_CASE("degenerate geometries cannot build a rescale map", "[geometry]") {
  GeometryParams s = wide();
  s.x_extent = s.length;  // zero-length downstream zone
  REQUIRE_THROWS_AS(build_rescale_map(s, narrow()), ValidationError);
  REQUIRE_THROWS_AS(build_rescale_map(narrow(), s), ValidationError);

  GeometryParams unset = wide();
  unset.x_extent = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(build_rescale_map(unset, narrow()), ValidationError);

  Grid grid;
  grid.points.resize(2, 2);
  grid.points << 0.0, 0.0, 55.0, 11.0;
  const GeometryParams filled = with_extents_from(unset, grid);
  REQUIRE(filled.x_extent == 55.0);
  REQUIRE(filled.y_extent == unset.y_extent);  // already set, left alone
}
