#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <tuple>
#include <vector>

#include "flowemu/coupling.hpp"
#include "flowemu/rng.hpp"

using flowemu::CouplingGraph;
using flowemu::FitConfig;
using flowemu::Matrix;
using flowemu::ModeLayout;
using flowemu::SliceFit;
using flowemu::ValidationError;
using flowemu::Vector;

namespace {

ModeLayout two_by_two() {
  ModeLayout layout;
  layout.variables = {"u", "v"};
  layout.counts = {2, 2};
  return layout;
}

// Precision with prescribed diagonal and partial correlations; entries are
// chosen so that -theta_ij / sqrt(theta_ii theta_jj) equals pc exactly.
SliceFit slice_with(const Vector& diag, const std::vector<std::tuple<int, int, double>>& pcs) {
  SliceFit fit;
  fit.precision = Matrix::Zero(diag.size(), diag.size());
  fit.precision.diagonal() = diag;
  for (const auto& [i, j, pc] : pcs) {
    const double value = -pc * std::sqrt(diag(i) * diag(j));
    fit.precision(i, j) = value;
    fit.precision(j, i) = value;
  }
  return fit;
}

Matrix random_gaussian(int rows, int cols, flowemu::Rng& rng) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = rng.normal();
  }
  return m;
}

Matrix random_designs(int n, flowemu::Rng& rng) {
  Matrix d(n, 2);
  for (int i = 0; i < n; ++i) {
    d(i, 0) = rng.uniform();
    d(i, 1) = rng.uniform();
  }
  return d;
}

// Coefficient slices drawn rowwise from N(0, t_true).
std::vector<Matrix> gaussian_slices(const Matrix& t_true, int n, int steps, flowemu::Rng& rng) {
  const Eigen::LLT<Matrix> chol(t_true);
  std::vector<Matrix> slices;
  for (int t = 0; t < steps; ++t) {
    slices.push_back(random_gaussian(n, static_cast<int>(t_true.rows()), rng) *
                     Matrix(chol.matrixL()).transpose());
  }
  return slices;
}

FitConfig quick_config(double lambda) {
  FitConfig config;
  config.lambda = lambda;
  config.n_starts = 1;
  config.max_bcd_iters = 40;
  return config;
}

}  // namespace

TEST_CASE("diagonal precisions yield an empty graph", "[coupling]") {
  const ModeLayout layout = two_by_two();
  Vector diag(4);
  diag << 2.0, 1.0, 0.5, 3.0;
  const std::vector<SliceFit> fits{slice_with(diag, {}), slice_with(diag, {}),
                                   slice_with(diag, {})};

  const CouplingGraph graph = extract_couplings(fits, layout, 3);
  CHECK(graph.edges.empty());
  CHECK(graph.per_slice_counts == std::vector<int>{0, 0, 0});
  CHECK(graph.target == 3);
}

TEST_CASE("patterns aggregate by frequency and mean magnitude", "[coupling]") {
  const ModeLayout layout = two_by_two();
  Vector diag(4);
  diag << 4.0, 1.0, 2.25, 1.0;

  // (0,2) in every slice, (1,3) in two, (0,3) in one; signs must not matter
  const std::vector<SliceFit> fits{
      slice_with(diag, {{0, 2, 0.5}, {1, 3, 0.9}, {0, 3, -0.99}}),
      slice_with(diag, {{0, 2, -0.3}, {1, 3, -0.7}}),
      slice_with(diag, {{0, 2, 0.4}}),
  };
  const CouplingGraph graph = extract_couplings(fits, layout, 10);

  REQUIRE(graph.edges.size() == 3);
  CHECK(graph.edges[0].a == 0);
  CHECK(graph.edges[0].b == 2);
  CHECK(graph.edges[0].frequency == 1.0);
  CHECK(std::fabs(graph.edges[0].weight - 0.4) < 1e-12);

  CHECK(graph.edges[1].a == 1);
  CHECK(graph.edges[1].b == 3);
  CHECK(std::fabs(graph.edges[1].frequency - 2.0 / 3.0) < 1e-15);
  CHECK(std::fabs(graph.edges[1].weight - 0.8) < 1e-12);

  CHECK(graph.edges[2].a == 0);
  CHECK(graph.edges[2].b == 3);
  CHECK(std::fabs(graph.edges[2].frequency - 1.0 / 3.0) < 1e-15);
  CHECK(std::fabs(graph.edges[2].weight - 0.99) < 1e-12);

  CHECK(graph.per_slice_counts == std::vector<int>{3, 2, 1});
}

TEST_CASE("per-slice selection keeps the strongest pairs", "[coupling]") {
  const ModeLayout layout = two_by_two();
  Vector diag(4);
  diag << 1.0, 1.0, 1.0, 1.0;

  // a within-variable entry sneaks in (as an unmasked fit could produce);
  // the graph must never carry it, whatever its size
  SliceFit fit = slice_with(diag, {{0, 2, 0.9}, {0, 3, -0.5}, {1, 2, 0.2}});
  fit.precision(0, 1) = fit.precision(1, 0) = -0.95;

  const CouplingGraph graph = extract_couplings({fit}, layout, 2);
  CHECK(graph.per_slice_counts == std::vector<int>{2});
  REQUIRE(graph.edges.size() == 2);
  CHECK(graph.edges[0].a == 0);
  CHECK(graph.edges[0].b == 2);
  CHECK(graph.edges[1].a == 0);
  CHECK(graph.edges[1].b == 3);

  SECTION("zero target keeps nothing") {
    const CouplingGraph none = extract_couplings({fit}, layout, 0);
    CHECK(none.edges.empty());
    CHECK(none.per_slice_counts == std::vector<int>{0});
  }
}

TEST_CASE("unfitted or malformed slices are rejected", "[coupling]") {
  const ModeLayout layout = two_by_two();
  Vector diag(4);
  diag << 1.0, 1.0, 1.0, 1.0;
  const SliceFit good = slice_with(diag, {{0, 2, 0.5}});

  CHECK_THROWS_AS(extract_couplings({}, layout, 3), ValidationError);
  CHECK_THROWS_AS(extract_couplings({good}, layout, -1), ValidationError);

  SliceFit unfitted;  // default-constructed: no precision at all
  CHECK_THROWS_AS(extract_couplings({unfitted}, layout, 3), ValidationError);

  SliceFit wrong_size;
  wrong_size.precision = Matrix::Identity(3, 3);
  CHECK_THROWS_AS(extract_couplings({wrong_size}, layout, 3), ValidationError);

  SliceFit bad_diag = good;
  bad_diag.precision(2, 2) = 0.0;
  CHECK_THROWS_AS(extract_couplings({bad_diag}, layout, 3), ValidationError);
}

TEST_CASE("a planted pair dominates synthetic refits", "[coupling]") {
  const ModeLayout layout = two_by_two();
  Matrix t_true = Matrix::Identity(4, 4);
  t_true(0, 2) = t_true(2, 0) = 0.8;

  flowemu::Rng rng(90210);
  const int n = 40, steps = 20;
  const Matrix designs = random_designs(n, rng);
  const auto slices = gaussian_slices(t_true, n, steps, rng);

  std::vector<SliceFit> fits;
  for (const Matrix& b : slices) {
    FitConfig config = quick_config(0.1);
    config.lambda = flowemu::tune_lambda_top_k(b, designs, layout, 1, config).lambda;
    fits.push_back(flowemu::bcd_fit(b, designs, layout, config));
  }

  const CouplingGraph graph = extract_couplings(fits, layout, 1);
  REQUIRE(!graph.edges.empty());
  CHECK(graph.edges[0].a == 0);
  CHECK(graph.edges[0].b == 2);
  CHECK(graph.edges[0].frequency >= 0.95);
  // the tuner sits at the largest penalty keeping one edge, so the survivor
  // is shrunk almost to zero; positivity is all the magnitude promises here
  CHECK(graph.edges[0].weight > 0.0);
}

TEST_CASE("nine edges per slice on six variables", "[coupling]") {
  ModeLayout layout;
  layout.variables = {"a", "b", "c", "d", "e", "f"};
  layout.counts = {1, 1, 1, 1, 1, 1};

  flowemu::Rng rng(5150);
  const Matrix root = random_gaussian(6, 6, rng);
  const Matrix t_true = root * root.transpose() / 6.0 + 0.3 * Matrix::Identity(6, 6);

  const int n = 80, steps = 3;
  const Matrix designs = random_designs(n, rng);
  const auto slices = gaussian_slices(t_true, n, steps, rng);

  std::vector<SliceFit> fits;
  for (const Matrix& b : slices) {
    FitConfig config = quick_config(0.1);
    const auto tuned = flowemu::tune_lambda_top_k(b, designs, layout, 9, config);
    CHECK(tuned.edges == 9);
    config.lambda = tuned.lambda;
    fits.push_back(flowemu::bcd_fit(b, designs, layout, config));
  }

  const CouplingGraph graph = extract_couplings(fits, layout, 9);
  CHECK(graph.per_slice_counts == std::vector<int>{9, 9, 9});
}

TEST_CASE("run order and mode signs leave the graph unchanged", "[coupling]") {
  const ModeLayout layout = two_by_two();
  Matrix t_true = Matrix::Identity(4, 4);
  t_true(0, 2) = t_true(2, 0) = 0.6;
  t_true(1, 3) = t_true(3, 1) = -0.45;

  flowemu::Rng rng(808);
  const int n = 24, steps = 3;
  const Matrix designs = random_designs(n, rng);
  const auto slices = gaussian_slices(t_true, n, steps, rng);
  const FitConfig config = quick_config(0.08);

  auto fit_all = [&](const std::vector<Matrix>& bs, const Matrix& ds) {
    std::vector<SliceFit> fits;
    for (const Matrix& b : bs) fits.push_back(flowemu::bcd_fit(b, ds, layout, config));
    return extract_couplings(fits, layout, 4);
  };
  const CouplingGraph base = fit_all(slices, designs);
  REQUIRE(!base.edges.empty());

  auto expect_same = [&](const CouplingGraph& other) {
    REQUIRE(other.edges.size() == base.edges.size());
    for (std::size_t e = 0; e < base.edges.size(); ++e) {
      CHECK(other.edges[e].a == base.edges[e].a);
      CHECK(other.edges[e].b == base.edges[e].b);
      CHECK(other.edges[e].frequency == base.edges[e].frequency);
      CHECK(std::fabs(other.edges[e].weight - base.edges[e].weight) < 1e-6);
    }
  };

  SECTION("reversing the run order") {
    std::vector<Matrix> reversed;
    Matrix rev_designs = designs.colwise().reverse();
    for (const Matrix& b : slices) reversed.push_back(b.colwise().reverse());
    expect_same(fit_all(reversed, rev_designs));
  }
  SECTION("flipping mode signs") {
    std::vector<Matrix> flipped = slices;
    for (Matrix& b : flipped) {
      b.col(1) *= -1.0;
      b.col(2) *= -1.0;
    }
    expect_same(fit_all(flipped, designs));
  }
}

TEST_CASE("emitters render the ranked edge list", "[coupling]") {
  const ModeLayout layout = two_by_two();
  Vector diag(4);
  diag << 4.0, 1.0, 2.25, 1.0;
  const std::vector<SliceFit> fits{
      slice_with(diag, {{0, 2, 0.5}, {1, 3, 0.9}, {0, 3, -0.99}}),
      slice_with(diag, {{0, 2, -0.3}, {1, 3, -0.7}}),
      slice_with(diag, {{0, 2, 0.4}}),
  };
  const CouplingGraph graph = extract_couplings(fits, layout, 10);

  const std::string csv = coupling_csv(graph);
  CHECK(csv ==
        "source,target,frequency,mean_abs_partial_correlation\n"
        "u1,v1,1.000000,0.400000\n"
        "u2,v2,0.666667,0.800000\n"
        "u1,v2,0.333333,0.990000\n");

  const std::string dot = coupling_dot(graph);
  CHECK(dot.find("graph couplings {") == 0);
  CHECK(dot.find("\"u1\";") != std::string::npos);
  CHECK(dot.find("\"v2\";") != std::string::npos);
  CHECK(dot.find("\"u1\" -- \"v1\"") != std::string::npos);
  CHECK(dot.find("\"u2\" -- \"v2\"") != std::string::npos);
  CHECK(dot.rfind("}\n") == dot.size() - 2);
}
