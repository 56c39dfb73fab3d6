#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <vector>

#include "flowemu/interpolate.hpp"
#include "flowemu/rng.hpp"

using namespace flowemu;

namespace {

Grid random_grid(int n, std::uint64_t seed, double span = 10.0) {
  Rng rng(seed);
  Grid g;
  g.points.resize(n, 2);
  for (int i = 0; i < n; ++i) {
    g.points(i, 0) = rng.uniform(0.0, span);
    g.points(i, 1) = rng.uniform(0.0, span);
  }
  return g;
}

// independent all-pairs reference: sort every distance, take the k nearest
double brute_force_idw(const Grid& src, const Vector& values, double qx, double qy, int k) {
  std::vector<std::pair<double, int>> d(src.size());
  for (int i = 0; i < src.size(); ++i) {
    const double dx = src.x(i) - qx, dy = src.y(i) - qy;
    d[i] = {dx * dx + dy * dy, i};
  }
  std::sort(d.begin(), d.end());
  if (d[0].first < 1e-24) return values(d[0].second);
  double num = 0.0, den = 0.0;
  for (int i = 0; i < k; ++i) {
    num += values(d[i].second) / d[i].first;
    den += 1.0 / d[i].first;
  }
  return num / den;
}

}  // namespace

TEST_CASE("querying at a source location returns that value verbatim", "[interpolate]") {
  const Grid src = random_grid(60, 1);
  Rng rng(2);
  Vector values(src.size());
  for (int i = 0; i < values.size(); ++i) values(i) = rng.normal();

  Grid query;
  query.points = src.points.topRows(20);
  const Vector out = idw_interpolate(src, values, query);
  for (int i = 0; i < 20; ++i) REQUIRE(out(i) == values(i));
}

TEST_CASE("two equidistant sources average with equal weight", "[interpolate]") {
  Grid src;
  src.points.resize(2, 2);
  src.points << 0.0, 0.0, 2.0, 0.0;
  Vector values(2);
  values << 3.0, 5.0;
  Grid query;
  query.points.resize(1, 2);
  query.points << 1.0, 0.0;
  const Vector out = idw_interpolate(src, values, query, 2);
  REQUIRE(out(0) == Catch::Approx(4.0).epsilon(1e-14));
}

TEST_CASE("constant fields pass through and output stays inside the neighbor range", "[interpolate]") {
  const Grid src = random_grid(80, 3);
  const Grid query = random_grid(40, 4);
  const IdwPlan plan = build_idw_plan(src, query);

  const Vector constant = Vector::Constant(src.size(), 7.25);
  const Vector flat = apply_idw_plan(plan, constant);
  for (int q = 0; q < flat.size(); ++q) REQUIRE(flat(q) == Catch::Approx(7.25).epsilon(1e-14));

  Rng rng(5);
  Vector values(src.size());
  for (int i = 0; i < values.size(); ++i) values(i) = rng.uniform(-4.0, 9.0);
  const Vector out = apply_idw_plan(plan, values);
  for (int q = 0; q < out.size(); ++q) {
    double lo = 1e300, hi = -1e300;
    for (int i = 0; i < plan.neighbor_count(); ++i) {
      lo = std::min(lo, values(plan.neighbors(i, q)));
      hi = std::max(hi, values(plan.neighbors(i, q)));
    }
    REQUIRE(out(q) >= lo - 1e-12);
    REQUIRE(out(q) <= hi + 1e-12);
  }
}

TEST_CASE("planned interpolation matches the all-pairs reference", "[interpolate]") {
  const Grid src = random_grid(150, 6);
  const Grid query = random_grid(70, 7);
  Rng rng(8);
  Vector values(src.size());
  for (int i = 0; i < values.size(); ++i) values(i) = rng.normal() * 3.0 + 1.0;

  const Vector out = idw_interpolate(src, values, query);
  for (int q = 0; q < query.size(); ++q) {
    const double expected = brute_force_idw(src, values, query.x(q), query.y(q), 10);
    REQUIRE(out(q) == Catch::Approx(expected).epsilon(1e-13));
  }
}

TEST_CASE("interpolation argument errors", "[interpolate]") {
  const Grid src = random_grid(5, 9);
  const Grid query = random_grid(3, 10);
  Vector values = Vector::Ones(5);

  Grid empty;
  empty.points.resize(0, 2);
  REQUIRE_THROWS_AS(build_idw_plan(empty, query), ValidationError);
  REQUIRE_THROWS_AS(build_idw_plan(src, query, 6), ValidationError);  // k exceeds source size
  REQUIRE_NOTHROW(build_idw_plan(src, query, 5));

  values(2) = std::numeric_limits<double>::infinity();
  REQUIRE_THROWS_AS(idw_interpolate(src, values, query, 5), ValidationError);
  REQUIRE_THROWS_AS(idw_interpolate(src, Vector::Ones(4), query, 5), ValidationError);
}
