#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "flowemu/cokrige.hpp"
#include "flowemu/common.hpp"
#include "flowemu/cpod.hpp"
#include "flowemu/rng.hpp"
#include "flowemu/snapshot.hpp"

namespace flowemu {

/// Ground-truth description of a synthetic ensemble. Every run shares the
/// variables, mode counts, and coefficient law; geometry varies with the
/// design. Designs live on [0,1]^p with the columns bound to the canonical
/// parameter order (length, nozzle_radius, inlet_diameter, injection_angle,
/// inlet_distance); parameters beyond column p stay at their base values.
struct SyntheticSpec {
  GeometryParams base;  // reference frame; both extents must be finite
  int grid_nx = 24;
  int grid_ny = 12;
  Matrix designs;  // n x p, p <= 5, entries in [0,1]
  std::vector<std::string> variables;
  std::vector<int> mode_counts;  // per variable, K = sum
  Vector mu;                     // K coefficient means, layout order
  Matrix t_cov;                  // K x K mode covariance, positive semidefinite
  Vector tau;                    // p kernel parameters, each in (0,1)
  int steps = 30;
  double noise = 0.0;  // standard deviation of iid field noise
  std::uint64_t seed = 1;
};

struct SyntheticEnsemble {
  std::vector<SnapshotEnsemble> runs;
  std::vector<PiecewiseAffineMap> to_common;  // run frame -> base frame, per run
  Grid common_grid;
  GeometryParams common_geometry;
  std::vector<Matrix> true_modes;  // per variable, J x K_r, orthonormal columns
  CoefficientTensor coefficients;  // the drawn loadings, steps x (n x K)
  Matrix designs;
};

/// Cell-centered tensor grid over the geometry's bounding box. Centers stay
/// strictly inside the domain and off the zone boundaries for generic
/// parameter values, so affine rescaling round-trips land on exact points.
inline Grid structured_grid(const GeometryParams& g, int nx, int ny) {
  validate(g);
  if (nx < 2 || ny < 2) throw ValidationError("structured_grid: need at least 2 cells per axis");
  if (!std::isfinite(g.x_extent) || !std::isfinite(g.y_extent)) {
    throw ValidationError("structured_grid: geometry extents must be finite");
  }
  Grid grid;
  grid.points.resize(nx * ny, 2);
  for (int i = 0; i < nx; ++i) {
    for (int j = 0; j < ny; ++j) {
      grid.points(i * ny + j, 0) = (i + 0.5) / nx * g.x_extent;
      grid.points(i * ny + j, 1) = (j + 0.5) / ny * g.y_extent;
    }
  }
  return grid;
}

namespace detail {

/// Distinct sinusoid-product profiles, one column per mode. Wavenumber pairs
/// walk a 3-wide raster and the phases shift per variable, so no two columns
/// coincide across the whole spec.
inline Matrix mode_profiles(const Grid& grid, const GeometryParams& g, int variable, int count) {
  const double pi = 3.14159265358979323846;
  Matrix raw(grid.size(), count);
  for (int m = 0; m < count; ++m) {
    const int kx = 1 + m % 3;
    const int ky = 1 + m / 3;
    const double px = 0.35 * (variable + 1);
    const double py = 0.15 * (variable + 1);
    for (int j = 0; j < grid.size(); ++j) {
      raw(j, m) = std::sin(kx * pi * grid.x(j) / g.x_extent + px) *
                  std::cos(ky * pi * grid.y(j) / g.y_extent + py);
    }
  }
  return raw;
}

inline Matrix orthonormalize(const Matrix& raw) {
  Eigen::ColPivHouseholderQR<Matrix> rank_check(raw);
  if (rank_check.rank() < raw.cols()) {
    throw NumericalError("synthetic modes: grid too coarse to hold " +
                         std::to_string(raw.cols()) + " independent modes");
  }
  Eigen::HouseholderQR<Matrix> qr(raw);
  Matrix q = qr.householderQ() * Matrix::Identity(raw.rows(), raw.cols());
  // pin each column's sign so the basis is a pure function of the spec
  for (int m = 0; m < q.cols(); ++m) {
    int lead;
    q.col(m).cwiseAbs().maxCoeff(&lead);
    if (q(lead, m) < 0.0) q.col(m) = -q.col(m);
  }
  return q;
}

/// Symmetric square root of a positive semidefinite matrix. Semidefinite is
/// deliberate: a zero block gives constant coefficients, which the generator
/// supports even though model fitting later needs strict definiteness.
inline Matrix psd_sqrt(const Matrix& sym, const char* label) {
  Eigen::SelfAdjointEigenSolver<Matrix> eigs(sym);
  if (eigs.info() != Eigen::Success) {
    throw NumericalError(std::string(label) + ": eigendecomposition failed");
  }
  const double floor = -1e-10 * std::max(1.0, eigs.eigenvalues().cwiseAbs().maxCoeff());
  if (eigs.eigenvalues().minCoeff() < floor) {
    throw ValidationError(std::string(label) + ": matrix is not positive semidefinite");
  }
  return eigs.eigenvectors() *
         eigs.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
         eigs.eigenvectors().transpose();
}

}  // namespace detail

inline void validate(const SyntheticSpec& spec) {
  validate(spec.base);
  if (!std::isfinite(spec.base.x_extent) || !std::isfinite(spec.base.y_extent)) {
    throw ValidationError("synthetic spec: base extents must be finite");
  }
  if (spec.grid_nx < 2 || spec.grid_ny < 2) {
    throw ValidationError("synthetic spec: grid must have at least 2 cells per axis");
  }
  const int n = static_cast<int>(spec.designs.rows());
  const int p = static_cast<int>(spec.designs.cols());
  if (n < 1) throw ValidationError("synthetic spec: at least one design point required");
  if (p < 1 || p > 5) throw ValidationError("synthetic spec: design dimension must lie in [1, 5]");
  if (!spec.designs.allFinite() || spec.designs.minCoeff() < 0.0 || spec.designs.maxCoeff() > 1.0) {
    throw ValidationError("synthetic spec: designs must lie in the unit box");
  }
  if (spec.variables.empty()) throw ValidationError("synthetic spec: no variables");
  if (spec.variables.size() != spec.mode_counts.size()) {
    throw ValidationError("synthetic spec: one mode count per variable required");
  }
  for (std::size_t a = 0; a < spec.variables.size(); ++a) {
    for (std::size_t b = a + 1; b < spec.variables.size(); ++b) {
      if (spec.variables[a] == spec.variables[b]) {
        throw ValidationError("synthetic spec: duplicate variable '" + spec.variables[a] + "'");
      }
    }
  }
  int total = 0;
  for (int count : spec.mode_counts) {
    if (count < 1) throw ValidationError("synthetic spec: every variable needs at least one mode");
    total += count;
  }
  if (total > spec.grid_nx * spec.grid_ny) {
    throw ValidationError("synthetic spec: more modes than grid points");
  }
  if (spec.mu.size() != total) throw ValidationError("synthetic spec: mu must have one entry per mode");
  if (spec.t_cov.rows() != total || spec.t_cov.cols() != total || !spec.t_cov.allFinite()) {
    throw ValidationError("synthetic spec: t_cov must be a finite K x K matrix");
  }
  const double scale = std::max(1.0, spec.t_cov.cwiseAbs().maxCoeff());
  if ((spec.t_cov - spec.t_cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw ValidationError("synthetic spec: t_cov must be symmetric");
  }
  if (spec.tau.size() != p) throw ValidationError("synthetic spec: one tau per design dimension required");
  for (int d = 0; d < p; ++d) {
    if (!(spec.tau(d) > 0.0) || !(spec.tau(d) < 1.0)) {
      throw ValidationError("synthetic spec: tau entries must lie in (0, 1)");
    }
  }
  if (spec.steps < 1) throw ValidationError("synthetic spec: at least one time step required");
  if (!std::isfinite(spec.noise) || spec.noise < 0.0) {
    throw ValidationError("synthetic spec: noise must be a nonnegative standard deviation");
  }
}

/// Run geometry at one design point: the leading columns move the canonical
/// parameters across the catalog ranges, and both extents co-scale with their
/// governing parameter so the domain keeps containing the flow zones.
inline GeometryParams geometry_from_design(const GeometryParams& base, const Vector& unit_row,
                                           const ParameterRanges& ranges = {}) {
  const DesignScaling scaling = DesignScaling::from_ranges(ranges);
  GeometryParams geom = base;
  double* fields[] = {&geom.length, &geom.nozzle_radius, &geom.inlet_diameter,
                      &geom.injection_angle, &geom.inlet_distance};
  if (unit_row.size() < 1 || unit_row.size() > 5) {
    throw ValidationError("geometry_from_design: design dimension must lie in [1, 5]");
  }
  for (int d = 0; d < unit_row.size(); ++d) {
    *fields[d] = scaling.lo(d) + unit_row(d) * (scaling.hi(d) - scaling.lo(d));
  }
  geom.x_extent = base.x_extent * geom.length / base.length;
  geom.y_extent = base.y_extent * geom.nozzle_radius / base.nozzle_radius;
  validate(geom);
  return geom;
}

/// Draws the full ensemble. Loadings follow the separable law: each step is
/// an independent matrix-normal draw with mean 1 mu', row covariance
/// R_tau(designs), and column covariance t_cov. Fields are the modes weighted
/// by those loadings, carried onto each run's grid by the same affine
/// rescaling the extraction inverts, plus optional white noise. The entire
/// output is a pure function of the spec, byte for byte.
inline SyntheticEnsemble generate(const SyntheticSpec& spec) {
  validate(spec);
  const int n = static_cast<int>(spec.designs.rows());
  const int total_modes = static_cast<int>(spec.mu.size());
  const int n_vars = static_cast<int>(spec.variables.size());

  SyntheticEnsemble out;
  out.common_geometry = spec.base;
  out.common_grid = structured_grid(spec.base, spec.grid_nx, spec.grid_ny);
  out.designs = spec.designs;

  out.true_modes.reserve(n_vars);
  for (int r = 0; r < n_vars; ++r) {
    out.true_modes.push_back(detail::orthonormalize(
        detail::mode_profiles(out.common_grid, spec.base, r, spec.mode_counts[r])));
  }

  const Matrix corr = correlation_matrix(spec.tau, spec.designs);
  Eigen::LLT<Matrix> run_chol(corr);
  if (run_chol.info() != Eigen::Success) {
    throw NumericalError("synthetic ensemble: design correlation factorization failed");
  }
  const Matrix l_run = run_chol.matrixL();
  const Matrix l_mode = detail::psd_sqrt(spec.t_cov, "synthetic ensemble t_cov");

  Rng rng(spec.seed);
  out.coefficients.slices.reserve(spec.steps);
  Matrix z(n, total_modes);
  for (int t = 0; t < spec.steps; ++t) {
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < total_modes; ++k) z(i, k) = rng.normal();
    }
    out.coefficients.slices.push_back(Vector::Ones(n) * spec.mu.transpose() +
                                      l_run * z * l_mode.transpose());
  }

  out.runs.resize(n);
  out.to_common.reserve(n);
  for (int i = 0; i < n; ++i) {
    const GeometryParams geom = geometry_from_design(spec.base, spec.designs.row(i).transpose());
    const PiecewiseAffineMap to_run = build_rescale_map(spec.base, geom);
    out.to_common.push_back(build_rescale_map(geom, spec.base));

    SnapshotEnsemble& run = out.runs[i];
    run.geometry = geom;
    run.grid = to_run.apply(out.common_grid);
    run.variables = spec.variables;
    run.fields.reserve(n_vars);
    int offset = 0;
    for (int r = 0; r < n_vars; ++r) {
      const int count = spec.mode_counts[r];
      Matrix field(out.common_grid.size(), spec.steps);
      for (int t = 0; t < spec.steps; ++t) {
        field.col(t) = out.true_modes[r] *
                       out.coefficients.slices[t].row(i).segment(offset, count).transpose();
      }
      run.fields.push_back(std::move(field));
      offset += count;
    }
  }

  if (spec.noise > 0.0) {
    for (auto& run : out.runs) {
      for (auto& field : run.fields) {
        for (int t = 0; t < field.cols(); ++t) {
          for (int j = 0; j < field.rows(); ++j) field(j, t) += spec.noise * rng.normal();
        }
      }
    }
  }
  return out;
}

}  // namespace flowemu
