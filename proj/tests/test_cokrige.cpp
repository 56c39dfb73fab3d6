#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "flowemu/cokrige.hpp"
#include "flowemu/design.hpp"
#include "flowemu/rng.hpp"

using namespace flowemu;

namespace {

Matrix random_spd(int k, Rng& rng, double ridge = 0.25) {
  Matrix a(k, k + 3);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k + 3; ++j) a(i, j) = rng.normal();
  }
  return a * a.transpose() / (k + 3) + ridge * Matrix::Identity(k, k);
}

Matrix random_matrix(int rows, int cols, Rng& rng) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = rng.normal();
  }
  return m;
}

// Conditional mean and covariance by brute force on the dense joint Gaussian
// over (beta_new, B_vec), with B_vec stacked run-major and covariance built
// as explicit Kronecker blocks R(i,j) * T.
struct DenseConditional {
  Vector mean;
  Matrix cov;
};

DenseConditional kronecker_oracle(const Vector& mu, const Matrix& t_cov, const Vector& tau,
                                  const Matrix& designs, const Matrix& coeffs,
                                  const Vector& c_new) {
  const int n = static_cast<int>(designs.rows());
  const int k = static_cast<int>(mu.size());

  Matrix joint(n * k, n * k);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double rij =
          correlation(tau, designs.row(i).transpose(), designs.row(j).transpose());
      joint.block(i * k, j * k, k, k) = rij * t_cov;
    }
  }
  Matrix cross(k, n * k);
  for (int i = 0; i < n; ++i) {
    const double ri = correlation(tau, designs.row(i).transpose(), c_new);
    cross.block(0, i * k, k, k) = ri * t_cov;
  }
  Vector centered(n * k);
  for (int i = 0; i < n; ++i) centered.segment(i * k, k) = coeffs.row(i).transpose() - mu;

  const Matrix solved = joint.fullPivLu().solve(cross.transpose());  // (nK x K)
  DenseConditional out;
  out.mean = mu + solved.transpose() * centered;
  out.cov = t_cov - cross * solved;
  return out;
}

}  // namespace

TEST_CASE("design scaling maps catalog corners to the unit box", "[cokrige]") {
  const DesignScaling s = DesignScaling::from_ranges();
  REQUIRE(s.dims() == 5);

  Vector lo_corner(5), hi_corner(5);
  lo_corner << 20.0, 2.0, 0.5, 45.0, 1.0;
  hi_corner << 100.0, 5.0, 2.0, 75.0, 4.0;
  REQUIRE(s.scale(lo_corner).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((s.scale(hi_corner) - Vector::Ones(5)).cwiseAbs().maxCoeff() < 1e-15);

  GeometryParams g;
  g.length = 60.0;
  g.nozzle_radius = 3.5;
  g.inlet_diameter = 1.25;
  g.injection_angle = 60.0;
  g.inlet_distance = 2.5;
  const Vector c = s.scale(design_from_geometry(g));
  REQUIRE(c(0) == Catch::Approx(0.5));
  REQUIRE(c(1) == Catch::Approx(0.5));
  REQUIRE(c(2) == Catch::Approx(0.5));
  REQUIRE(c(3) == Catch::Approx(0.5));
  REQUIRE(c(4) == Catch::Approx(0.5));

  DesignScaling bad;
  bad.lo = Vector::Ones(2);
  bad.hi = Vector::Ones(2);
  REQUIRE_THROWS_AS(validate(bad), ValidationError);
}

TEST_CASE("correlation function basics", "[cokrige]") {
  Vector tau(1);
  tau << 0.5;
  Vector a(1), b(1);
  a << 0.25;
  b << 0.75;
  REQUIRE(correlation(tau, a, a) == 1.0);
  // |d| = 0.5: 0.5^(4*0.25) = 0.5
  REQUIRE(correlation(tau, a, b) == Catch::Approx(0.5).epsilon(1e-14));
  REQUIRE(correlation(tau, a, b) == correlation(tau, b, a));

  // reparameterization identity against the Gaussian kernel form
  Rng rng(303);
  Vector tau3(3);
  tau3 << 0.3, 0.6, 0.85;
  for (int trial = 0; trial < 100; ++trial) {
    Vector c1(3), c2(3);
    for (int j = 0; j < 3; ++j) {
      c1(j) = rng.uniform();
      c2(j) = rng.uniform();
    }
    double expo = 0.0;
    for (int j = 0; j < 3; ++j) {
      const double theta = -4.0 * std::log(tau3(j));
      expo -= theta * (c1(j) - c2(j)) * (c1(j) - c2(j));
    }
    REQUIRE(correlation(tau3, c1, c2) == Catch::Approx(std::exp(expo)).epsilon(1e-14));
  }

  Vector bad_tau(1);
  bad_tau << 1.0;
  REQUIRE_THROWS_AS(correlation(bad_tau, a, b), ValidationError);
  bad_tau << 0.0;
  REQUIRE_THROWS_AS(correlation(bad_tau, a, b), ValidationError);
  bad_tau << -0.5;
  REQUIRE_THROWS_AS(correlation(bad_tau, a, b), ValidationError);
}

TEST_CASE("correlation matrices factor cleanly on spread designs", "[cokrige]") {
  const Matrix designs = latin_hypercube(3, 12, 99);
  Vector tau(3);
  tau << 0.4, 0.7, 0.55;
  const Matrix r = correlation_matrix(tau, designs);
  REQUIRE((r - r.transpose()).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(r.diagonal().isOnes());

  const CorrelationFactor f = factor_correlation(r, designs);
  REQUIRE(f.jitter == 0.0);

  // perfectly correlated designs need the diagonal boost
  const Matrix ones = Matrix::Ones(2, 2);
  Matrix dup(2, 1);
  dup << 0.3, 0.3;
  const CorrelationFactor boosted = factor_correlation(ones, dup);
  REQUIRE(boosted.jitter >= 1e-10);
  REQUIRE(boosted.jitter <= 1e-6);

  // an indefinite matrix exhausts the ladder and names the closest pair
  Matrix indefinite(2, 2);
  indefinite << 1.0, 2.0, 2.0, 1.0;
  Matrix dd(2, 1);
  dd << 0.1, 0.9;
  REQUIRE_THROWS_WITH(factor_correlation(indefinite, dd),
                      Catch::Matchers::ContainsSubstring("rows 0 and 1"));
}

TEST_CASE("gp slice validates its inputs", "[cokrige]") {
  Rng rng(7);
  const Matrix designs = latin_hypercube(2, 4, 11);
  Vector tau(2);
  tau << 0.5, 0.5;
  const Vector mu = Vector::Zero(2);
  const Matrix coeffs = random_matrix(4, 2, rng);

  Matrix not_spd(2, 2);
  not_spd << 1.0, 2.0, 2.0, 1.0;
  REQUIRE_THROWS_AS(GpModelSlice(mu, not_spd, tau, designs, coeffs), ValidationError);

  Vector bad_tau(2);
  bad_tau << 0.5, 1.0;
  REQUIRE_THROWS_AS(GpModelSlice(mu, Matrix::Identity(2, 2), bad_tau, designs, coeffs),
                    ValidationError);

  REQUIRE_THROWS_AS(GpModelSlice(mu, Matrix::Identity(2, 2), tau, designs, random_matrix(3, 2, rng)),
                    ValidationError);
}

TEST_CASE("prediction interpolates training data and reverts to the prior", "[cokrige]") {
  Rng rng(21);
  const int n = 6, k = 3, p = 2;
  const Matrix designs = latin_hypercube(p, n, 5);
  Vector tau(p);
  tau << 0.35, 0.6;
  Vector mu(k);
  mu << 1.0, -0.5, 0.25;
  const Matrix t_cov = random_spd(k, rng);
  const Matrix coeffs = random_matrix(n, k, rng);

  const GpModelSlice model(mu, t_cov, tau, designs, coeffs);
  REQUIRE(model.jitter() == 0.0);

  for (int i = 0; i < n; ++i) {
    const auto pred = model.predict(designs.row(i).transpose());
    REQUIRE((pred.mean - coeffs.row(i).transpose()).cwiseAbs().maxCoeff() < 1e-10);
    REQUIRE(pred.scale <= 1e-8);
    REQUIRE(pred.cov.cwiseAbs().maxCoeff() <= 1e-8 * t_cov.cwiseAbs().maxCoeff());
  }

  // far outside the unit box every correlation underflows to zero
  const Vector far = 50.0 * Vector::Ones(p);
  const auto prior = model.predict(far);
  REQUIRE((prior.mean - mu).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE((prior.cov - t_cov).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE(prior.scale == 1.0);

  // scale factor stays inside [0,1] everywhere
  for (int trial = 0; trial < 200; ++trial) {
    Vector c(p);
    for (int j = 0; j < p; ++j) c(j) = 1.4 * rng.uniform() - 0.2;
    const auto pred = model.predict(c);
    REQUIRE(pred.scale >= 0.0);
    REQUIRE(pred.scale <= 1.0);
  }

  REQUIRE(model.in_design_hull(designs.row(0).transpose()));
  REQUIRE_FALSE(model.in_design_hull(far));
}

TEST_CASE("prediction matches the dense Kronecker conditional oracle", "[cokrige]") {
  Rng rng(1234);
  for (int instance = 0; instance < 25; ++instance) {
    const int n = 3 + static_cast<int>(rng.below(3));
    const int k = 2 + static_cast<int>(rng.below(2));
    const int p = 1 + static_cast<int>(rng.below(2));

    const Matrix designs = latin_hypercube(p, n, 1000 + instance);
    Vector tau(p);
    for (int j = 0; j < p; ++j) tau(j) = 0.2 + 0.6 * rng.uniform();
    Vector mu(k);
    for (int j = 0; j < k; ++j) mu(j) = rng.normal();
    const Matrix t_cov = random_spd(k, rng);
    const Matrix coeffs = random_matrix(n, k, rng);

    const GpModelSlice model(mu, t_cov, tau, designs, coeffs);

    Vector c_new(p);
    for (int j = 0; j < p; ++j) c_new(j) = rng.uniform();

    const auto pred = model.predict(c_new);
    const auto oracle = kronecker_oracle(mu, t_cov, tau, designs, coeffs, c_new);

    REQUIRE((pred.mean - oracle.mean).cwiseAbs().maxCoeff() < 1e-10);
    REQUIRE((pred.cov - oracle.cov).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("MMSE mean ignores the covariance coupling", "[cokrige]") {
  Rng rng(77);
  const int n = 5, k = 4, p = 2;
  const Matrix designs = latin_hypercube(p, n, 31);
  Vector tau(p);
  tau << 0.45, 0.7;
  Vector mu(k);
  for (int j = 0; j < k; ++j) mu(j) = rng.normal();
  const Matrix t_full = random_spd(k, rng);
  const Matrix t_diag = Matrix(t_full.diagonal().asDiagonal());
  const Matrix coeffs = random_matrix(n, k, rng);

  const GpModelSlice full(mu, t_full, tau, designs, coeffs);
  const GpModelSlice indep(mu, t_diag, tau, designs, coeffs);

  for (int trial = 0; trial < 50; ++trial) {
    Vector c(p);
    for (int j = 0; j < p; ++j) c(j) = rng.uniform();
    const auto a = full.predict(c);
    const auto b = indep.predict(c);
    REQUIRE((a.mean - b.mean).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("hdcr membership basics", "[cokrige]") {
  Rng rng(404);
  const int n = 5, p = 1;
  const Matrix designs = latin_hypercube(p, n, 8);
  Vector tau(p);
  tau << 0.05;  // rough kernel so interior points keep real predictive variance
  Vector mu(2);
  mu << 0.3, -0.2;
  Matrix t_cov(2, 2);
  t_cov << 1.0, 0.9, 0.9, 1.0;
  const Matrix coeffs = random_matrix(n, 2, rng);
  const GpModelSlice model(mu, t_cov, tau, designs, coeffs);

  Vector c(1);
  c << 0.46;
  const auto pred = model.predict(c);
  REQUIRE(pred.scale > 1e-4);

  REQUIRE(model.hdcr_contains(c, pred.mean, 0.5, false));
  REQUIRE(model.hdcr_contains(c, pred.mean, 0.5, true));

  Vector off = pred.mean + Vector::Ones(2);
  REQUIRE_FALSE(model.hdcr_contains(c, off, 0.999999, false));

  REQUIRE_THROWS_AS(model.hdcr_contains(c, pred.mean, 0.0, false), ValidationError);
  REQUIRE_THROWS_AS(model.hdcr_contains(c, pred.mean, 1.0, false), ValidationError);

  // at a training point the region collapses to the interpolated value
  const Vector c0 = designs.row(0).transpose();
  const Vector b0 = model.predict(c0).mean;
  REQUIRE(model.hdcr_contains(c0, b0, 0.1, false));
  REQUIRE_FALSE(model.hdcr_contains(c0, b0 + 1e-6 * Vector::Ones(2), 0.1, false));
}

TEST_CASE("independence-model region under-covers correlated draws", "[cokrige]") {
  Rng rng(2026);
  const int n = 5, p = 1;
  const Matrix designs = latin_hypercube(p, n, 8);
  Vector tau(p);
  tau << 0.05;
  Vector mu(2);
  mu << 0.3, -0.2;
  Matrix t_cov(2, 2);
  t_cov << 1.0, 0.9, 0.9, 1.0;
  const Matrix coeffs = random_matrix(n, 2, rng);
  const GpModelSlice model(mu, t_cov, tau, designs, coeffs);

  Vector c(1);
  c << 0.46;
  const auto pred = model.predict(c);
  const Matrix chol = Matrix(Eigen::LLT<Matrix>(pred.cov).matrixL());

  const int draws = 100000;
  const double alpha = 0.1;
  int inside_indep = 0, inside_full = 0;
  // independent estimate of the same coverage from the raw quadratic form
  const double chi2 = chi_squared_quantile(2.0, 1.0 - alpha);
  int oracle_inside = 0;
  Rng oracle_rng(515);

  for (int d = 0; d < draws; ++d) {
    Vector z(2);
    z << rng.normal(), rng.normal();
    const Vector beta = pred.mean + chol * z;
    if (model.hdcr_contains(c, beta, alpha, true)) ++inside_indep;
    if (model.hdcr_contains(c, beta, alpha, false)) ++inside_full;

    Vector zo(2);
    zo << oracle_rng.normal(), oracle_rng.normal();
    const Vector diff = chol * zo;  // beta - mean under the correlated law
    const double quad = diff.cwiseAbs2().cwiseQuotient(t_cov.diagonal()).sum();
    if (quad <= pred.scale * chi2) ++oracle_inside;
  }

  const double coverage_indep = static_cast<double>(inside_indep) / draws;
  const double coverage_full = static_cast<double>(inside_full) / draws;
  const double coverage_oracle = static_cast<double>(oracle_inside) / draws;

  // the full model's region is exact by construction
  REQUIRE(std::fabs(coverage_full - 0.9) < 0.01);
  // the independence region under-covers, and the implementation agrees with
  // the direct quadratic-form simulation
  REQUIRE(coverage_indep < 0.89);
  REQUIRE(coverage_indep > 0.75);
  REQUIRE(std::fabs(coverage_indep - coverage_oracle) < 0.01);
}
