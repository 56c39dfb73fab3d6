#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "flowemu/cpod.hpp"
#include "flowemu/rng.hpp"

using namespace flowemu;

namespace {

GeometryParams test_geometry() {
  GeometryParams g;
  g.length = 22.0;
  g.nozzle_radius = 3.2;
  g.inlet_diameter = 0.58;
  g.injection_angle = 58.0;
  g.inlet_distance = 3.4;
  g.x_extent = 33.0;
  g.y_extent = 10.0;
  return g;
}

Grid random_domain_grid(int points, std::uint64_t seed, const GeometryParams& g) {
  Rng rng(seed);
  Grid grid;
  grid.points.resize(points, 2);
  for (int j = 0; j < points; ++j) {
    grid.points(j, 0) = rng.uniform() * g.x_extent;
    grid.points(j, 1) = rng.uniform() * g.y_extent;
  }
  return grid;
}

Matrix random_matrix(int rows, int cols, Rng& rng) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = rng.normal();
  }
  return m;
}

std::vector<PiecewiseAffineMap> identity_maps(int n, const GeometryParams& g) {
  return std::vector<PiecewiseAffineMap>(static_cast<std::size_t>(n),
                                         PiecewiseAffineMap::between(g, g));
}

// Sum of squared projection residuals of the snapshot columns onto an
// orthonormal basis. Computed column by column, independent of any spectral
// identity the implementation relies on.
double reconstruction_sse(const Matrix& snapshots, const Matrix& basis) {
  double sse = 0.0;
  for (int l = 0; l < snapshots.cols(); ++l) {
    const Vector s = snapshots.col(l);
    sse += (s - basis * (basis.transpose() * s)).squaredNorm();
  }
  return sse;
}

}  // namespace

TEST_CASE("mode layout bookkeeping", "[cpod]") {
  const ModeLayout layout{{"u", "v", "P"}, {3, 2, 4}};
  REQUIRE(layout.total() == 9);
  REQUIRE(layout.offset(0) == 0);
  REQUIRE(layout.offset(1) == 3);
  REQUIRE(layout.offset(2) == 5);
  REQUIRE(layout.variable_of(0) == 0);
  REQUIRE(layout.variable_of(2) == 0);
  REQUIRE(layout.variable_of(3) == 1);
  REQUIRE(layout.variable_of(8) == 2);
  REQUIRE(layout.same_variable(0, 2));
  REQUIRE_FALSE(layout.same_variable(2, 3));
  REQUIRE(layout.mode_name(0) == "u1");
  REQUIRE(layout.mode_name(4) == "v2");
  REQUIRE(layout.mode_name(5) == "P1");
  REQUIRE(layout.index_of("P") == 2);
  REQUIRE_THROWS_AS(layout.index_of("w"), ValidationError);
  REQUIRE_THROWS_AS(layout.variable_of(9), ValidationError);

  const ModeLayout one = ModeLayout::single("u", 4);
  REQUIRE(one.total() == 4);
  REQUIRE(one.mode_name(3) == "u4");

  const ModeLayout indep = ModeLayout::independent(3);
  REQUIRE(indep.total() == 3);
  REQUIRE(indep.variables.size() == 3);
  REQUIRE(indep.mode_name(1) == "m21");  // each singleton block restarts at 1
  REQUIRE_FALSE(indep.same_variable(0, 1));
}

TEST_CASE("Gram matrix matches the explicit double loop", "[cpod]") {
  Rng rng(101);
  const Matrix s = random_matrix(20, 8, rng);
  const Matrix gram = inner_product_matrix(s);

  for (int l = 0; l < 8; ++l) {
    for (int m = 0; m < 8; ++m) {
      double dot = 0.0;
      for (int j = 0; j < 20; ++j) dot += s(j, l) * s(j, m);
      REQUIRE(gram(l, m) == Catch::Approx(dot).margin(1e-12));
    }
  }
  REQUIRE((gram - gram.transpose()).cwiseAbs().maxCoeff() == 0.0);

  std::vector<Vector> cols;
  for (int l = 0; l < 8; ++l) cols.push_back(s.col(l));
  REQUIRE((inner_product_matrix(cols) - gram).cwiseAbs().maxCoeff() == 0.0);

  cols.push_back(Vector::Zero(7));
  REQUIRE_THROWS_AS(inner_product_matrix(cols), ValidationError);
  REQUIRE_THROWS_AS(inner_product_matrix(std::vector<Vector>{}), ValidationError);
}

TEST_CASE("energy ratio on a hand-checked spectrum", "[cpod]") {
  Vector lam(2);
  lam << 3.0, 1.0;
  REQUIRE(energy_ratio(lam, 1) == Catch::Approx(0.75));
  REQUIRE(energy_ratio(lam, 2) == Catch::Approx(1.0));

  REQUIRE_THROWS_AS(energy_ratio(lam, 0), ValidationError);
  REQUIRE_THROWS_AS(energy_ratio(lam, 3), ValidationError);
  REQUIRE_THROWS_AS(energy_ratio(Vector(), 1), ValidationError);

  Vector ascending(2);
  ascending << 1.0, 3.0;
  REQUIRE_THROWS_AS(energy_ratio(ascending, 1), ValidationError);

  Vector negative(2);
  negative << 3.0, -1.0;
  REQUIRE_THROWS_AS(energy_ratio(negative, 1), ValidationError);

  REQUIRE_THROWS_AS(energy_ratio(Vector::Zero(3), 1), ValidationError);
}

TEST_CASE("rank-one ensemble keeps exactly one mode and recovers it", "[cpod]") {
  const GeometryParams g = test_geometry();
  const Grid grid = random_domain_grid(60, 7, g);
  const int n = 3, steps = 4;

  Rng rng(55);
  Vector w(grid.size());
  for (int j = 0; j < w.size(); ++j) w(j) = rng.normal();

  std::vector<SnapshotEnsemble> runs;
  Matrix amplitudes(n, steps);
  for (int i = 0; i < n; ++i) {
    Matrix field(grid.size(), steps);
    for (int t = 0; t < steps; ++t) {
      amplitudes(i, t) = rng.normal() + 2.0;
      field.col(t) = amplitudes(i, t) * w;
    }
    runs.push_back({g, grid, {"u"}, {field}});
  }

  const auto result = extract_basis(runs, identity_maps(n, g), grid, g);
  const VariableBasis& vb = result.basis.variable("u");

  REQUIRE(vb.count() == 1);
  REQUIRE(result.basis.total_modes() == 1);
  REQUIRE(result.warnings.empty());

  // the single mode is +-w normalized
  const Vector unit = w / w.norm();
  const double align = std::fabs(unit.dot(vb.modes.col(0)));
  REQUIRE(align == Catch::Approx(1.0).epsilon(1e-12));

  // leading eigenvalue carries all the energy
  REQUIRE(vb.eigenvalues(0) == Catch::Approx(vb.total_energy).epsilon(1e-10));
  REQUIRE(vb.total_energy ==
          Catch::Approx(amplitudes.squaredNorm() * w.squaredNorm()).epsilon(1e-12));

  // coefficients are the signed amplitudes times |w|
  REQUIRE(result.coefficients.steps() == steps);
  REQUIRE(result.coefficients.runs() == n);
  REQUIRE(result.coefficients.modes() == 1);
  const double sign = unit.dot(vb.modes.col(0)) > 0.0 ? 1.0 : -1.0;
  for (int t = 0; t < steps; ++t) {
    for (int i = 0; i < n; ++i) {
      REQUIRE(result.coefficients.slices[t](i, 0) ==
              Catch::Approx(sign * amplitudes(i, t) * w.norm()).epsilon(1e-10));
    }
  }
}

TEST_CASE("truncation at the energy target is L2-optimal", "[cpod]") {
  const GeometryParams g = test_geometry();
  const Grid grid = random_domain_grid(40, 17, g);
  const int n = 4, steps = 6;

  Rng rng(90);
  std::vector<SnapshotEnsemble> runs;
  for (int i = 0; i < n; ++i) {
    runs.push_back({g, grid, {"u"}, {random_matrix(grid.size(), steps, rng)}});
  }

  CpodOptions opts;
  opts.energy_target = 0.9;
  const auto result = extract_basis(runs, identity_maps(n, g), grid, g, opts);
  const VariableBasis& vb = result.basis.variable("u");
  const int kept = vb.count();
  REQUIRE(kept >= 1);
  REQUIRE(kept < n * steps);

  // kept count is the smallest reaching the target
  Vector cumulative(vb.eigenvalues.size());
  double run_sum = 0.0;
  for (int k = 0; k < vb.eigenvalues.size(); ++k) {
    run_sum += vb.eigenvalues(k);
    cumulative(k) = run_sum / vb.total_energy;
  }
  REQUIRE(cumulative(kept - 1) >= 0.9 * (1.0 - 1e-10));
  if (kept > 1) REQUIRE(cumulative(kept - 2) < 0.9);

  // snapshot matrix in extraction column order (identity maps pass fields through)
  Matrix snapshots(grid.size(), n * steps);
  for (int t = 0; t < steps; ++t) {
    for (int i = 0; i < n; ++i) snapshots.col(t * n + i) = runs[i].fields[0].col(t);
  }

  // residual energy equals the dropped tail of the spectrum
  const double sse = reconstruction_sse(snapshots, vb.modes);
  const double tail = vb.total_energy - vb.eigenvalues.head(kept).sum();
  REQUIRE(sse == Catch::Approx(tail).epsilon(1e-8));

  // no random subspace of the same dimension does better
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    Rng alt(seed);
    const Matrix raw = random_matrix(grid.size(), kept, alt);
    const Matrix q =
        Eigen::HouseholderQR<Matrix>(raw).householderQ() * Matrix::Identity(grid.size(), kept);
    REQUIRE(reconstruction_sse(snapshots, q) >= sse * (1.0 - 1e-10));
  }

  // modes are orthonormal, spectrum is descending
  const Matrix gram = vb.modes.transpose() * vb.modes;
  REQUIRE((gram - Matrix::Identity(kept, kept)).cwiseAbs().maxCoeff() < 1e-10);
  for (int k = 1; k < vb.eigenvalues.size(); ++k) {
    REQUIRE(vb.eigenvalues(k) <= vb.eigenvalues(k - 1) + 1e-10 * vb.eigenvalues(0));
  }
}

TEST_CASE("full energy target keeps the numerical rank", "[cpod]") {
  const GeometryParams g = test_geometry();
  const Grid grid = random_domain_grid(50, 23, g);
  const int n = 3, steps = 5;

  // exact rank-3 data with well-separated component scales
  Rng rng(41);
  const Matrix raw = random_matrix(grid.size(), 3, rng);
  Matrix factors =
      Eigen::HouseholderQR<Matrix>(raw).householderQ() * Matrix::Identity(grid.size(), 3);
  factors.col(0) *= 3.0;
  factors.col(1) *= 2.0;

  std::vector<SnapshotEnsemble> runs;
  std::vector<Matrix> weights;
  for (int i = 0; i < n; ++i) {
    const Matrix z = random_matrix(3, steps, rng);
    runs.push_back({g, grid, {"u"}, {factors * z}});
    weights.push_back(z);
  }

  CpodOptions opts;
  opts.energy_target = 1.0;
  const auto result = extract_basis(runs, identity_maps(n, g), grid, g, opts);
  const VariableBasis& vb = result.basis.variable("u");

  REQUIRE(vb.count() == 3);

  Matrix snapshots(grid.size(), n * steps);
  for (int t = 0; t < steps; ++t) {
    for (int i = 0; i < n; ++i) snapshots.col(t * n + i) = runs[i].fields[0].col(t);
  }
  REQUIRE(reconstruction_sse(snapshots, vb.modes) <= 1e-10 * vb.total_energy);
}

TEST_CASE("zero-energy variable keeps no modes and raises a warning", "[cpod]") {
  const GeometryParams g = test_geometry();
  const Grid grid = random_domain_grid(30, 3, g);
  const int n = 2, steps = 3;

  Rng rng(77);
  std::vector<SnapshotEnsemble> runs;
  for (int i = 0; i < n; ++i) {
    runs.push_back({g,
                    grid,
                    {"u", "P"},
                    {random_matrix(grid.size(), steps, rng), Matrix::Zero(grid.size(), steps)}});
  }

  const auto result = extract_basis(runs, identity_maps(n, g), grid, g);
  REQUIRE(result.warnings.size() == 1);
  REQUIRE(result.warnings[0].find("'P'") != std::string::npos);

  const VariableBasis& dead = result.basis.variable("P");
  REQUIRE(dead.count() == 0);
  REQUIRE(dead.eigenvalues.size() == 0);
  REQUIRE(dead.total_energy == 0.0);

  const int live = result.basis.variable("u").count();
  REQUIRE(live >= 1);
  REQUIRE(result.basis.total_modes() == live);
  REQUIRE(result.coefficients.modes() == live);
}

TEST_CASE("centered extraction reconstructs snapshots as mean plus projection", "[cpod]") {
  const GeometryParams g = test_geometry();
  const Grid grid = random_domain_grid(35, 13, g);
  const int n = 2, steps = 4;

  Rng rng(67);
  Vector mean_field(grid.size());
  for (int j = 0; j < mean_field.size(); ++j) mean_field(j) = 5.0 + rng.normal();
  const Matrix directions = random_matrix(grid.size(), 2, rng);

  std::vector<SnapshotEnsemble> runs;
  for (int i = 0; i < n; ++i) {
    Matrix field(grid.size(), steps);
    for (int t = 0; t < steps; ++t) {
      field.col(t) = mean_field + directions * Vector::Random(2);
    }
    runs.push_back({g, grid, {"u"}, {field}});
  }

  CpodOptions opts;
  opts.center_snapshots = true;
  opts.energy_target = 1.0;
  const auto result = extract_basis(runs, identity_maps(n, g), grid, g, opts);
  const VariableBasis& vb = result.basis.variable("u");

  REQUIRE(vb.centered());
  REQUIRE(vb.mean.size() == grid.size());
  REQUIRE(vb.count() <= 2);  // centered data is at most rank 2

  const ModeLayout layout = result.basis.layout();
  for (int t = 0; t < steps; ++t) {
    for (int i = 0; i < n; ++i) {
      const Vector coeffs =
          result.coefficients.slices[t].row(i).segment(layout.offset(0), vb.count()).transpose();
      const Vector rebuilt = vb.mean + vb.modes * coeffs;
      REQUIRE((rebuilt - runs[i].fields[0].col(t)).cwiseAbs().maxCoeff() < 1e-9);
    }
  }
}

TEST_CASE("coefficients equal direct projections for a two-variable ensemble", "[cpod]") {
  const GeometryParams g = test_geometry();
  const Grid grid = random_domain_grid(45, 29, g);
  const int n = 3, steps = 5;

  Rng rng(5150);
  std::vector<SnapshotEnsemble> runs;
  for (int i = 0; i < n; ++i) {
    runs.push_back({g,
                    grid,
                    {"u", "v"},
                    {random_matrix(grid.size(), steps, rng), random_matrix(grid.size(), steps, rng)}});
  }

  const auto result = extract_basis(runs, identity_maps(n, g), grid, g);
  const ModeLayout layout = result.basis.layout();

  for (std::size_t r = 0; r < 2; ++r) {
    const VariableBasis& vb = result.basis.variables[r];
    const int off = layout.offset(static_cast<int>(r));
    for (int t = 0; t < steps; ++t) {
      for (int i = 0; i < n; ++i) {
        const Vector expected = vb.modes.transpose() * runs[i].fields[r].col(t);
        const Vector actual =
            result.coefficients.slices[t].row(i).segment(off, vb.count()).transpose();
        REQUIRE((expected - actual).cwiseAbs().maxCoeff() < 1e-10);
      }
    }
  }
}

TEST_CASE("extraction input validation", "[cpod]") {
  const GeometryParams g = test_geometry();
  const Grid grid = random_domain_grid(30, 3, g);

  Rng rng(8);
  SnapshotEnsemble run{g, grid, {"u"}, {random_matrix(grid.size(), 3, rng)}};

  REQUIRE_THROWS_AS(extract_basis({}, {}, grid, g), ValidationError);
  REQUIRE_THROWS_AS(extract_basis({run}, identity_maps(2, g), grid, g), ValidationError);

  CpodOptions bad;
  bad.energy_target = 0.0;
  REQUIRE_THROWS_AS(extract_basis({run}, identity_maps(1, g), grid, g, bad), ValidationError);
  bad.energy_target = 1.5;
  REQUIRE_THROWS_AS(extract_basis({run}, identity_maps(1, g), grid, g, bad), ValidationError);

  SnapshotEnsemble shorter = run;
  shorter.fields[0] = shorter.fields[0].leftCols(2);
  REQUIRE_THROWS_AS(extract_basis({run, shorter}, identity_maps(2, g), grid, g), ValidationError);

  SnapshotEnsemble renamed = run;
  renamed.variables = {"v"};
  REQUIRE_THROWS_AS(extract_basis({run, renamed}, identity_maps(2, g), grid, g), ValidationError);
}
