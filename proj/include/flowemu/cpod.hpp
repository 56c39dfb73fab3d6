#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "flowemu/common.hpp"
#include "flowemu/eigen_solver.hpp"
#include "flowemu/geometry.hpp"
#include "flowemu/interpolate.hpp"
#include "flowemu/parallel.hpp"
#include "flowemu/snapshot.hpp"

namespace flowemu {

/// How the flat mode index splits into per-variable blocks. Mode k of
/// variable r sits at offset(r) + k; names look like "u1", "P3".
struct ModeLayout {
  std::vector<std::string> variables;
  std::vector<int> counts;

  int total() const {
    int sum = 0;
    for (int c : counts) sum += c;
    return sum;
  }
  int offset(int var) const {
    int sum = 0;
    for (int v = 0; v < var; ++v) sum += counts[v];
    return sum;
  }
  int variable_of(int flat) const {
    for (int v = 0, sum = 0; v < static_cast<int>(counts.size()); ++v) {
      sum += counts[v];
      if (flat < sum) return v;
    }
    throw ValidationError("mode layout: flat index out of range");
  }
  bool same_variable(int i, int j) const { return variable_of(i) == variable_of(j); }
  std::string mode_name(int flat) const {
    const int v = variable_of(flat);
    return variables[v] + std::to_string(flat - offset(v) + 1);
  }
  int index_of(const std::string& variable) const {
    for (int v = 0; v < static_cast<int>(variables.size()); ++v) {
      if (variables[v] == variable) return v;
    }
    throw ValidationError("mode layout: unknown variable '" + variable + "'");
  }

  static ModeLayout single(const std::string& name, int modes) { return {{name}, {modes}}; }
  /// Every mode its own variable; nothing is masked.
  static ModeLayout independent(int modes) {
    ModeLayout layout;
    for (int k = 0; k < modes; ++k) {
      layout.variables.push_back("m" + std::to_string(k + 1));
      layout.counts.push_back(1);
    }
    return layout;
  }
};

/// Gram matrix of snapshot columns: Q(l, m) = <column l, column m>.
inline Matrix inner_product_matrix(const Matrix& snapshots) {
  Matrix q = snapshots.transpose() * snapshots;
  return 0.5 * (q + q.transpose());
}

inline Matrix inner_product_matrix(const std::vector<Vector>& snapshots) {
  if (snapshots.empty()) throw ValidationError("inner_product_matrix: no snapshots");
  const auto rows = snapshots.front().size();
  for (const auto& s : snapshots) {
    if (s.size() != rows) throw ValidationError("inner_product_matrix: mismatched snapshot lengths");
  }
  Matrix stacked(rows, static_cast<int>(snapshots.size()));
  for (int i = 0; i < stacked.cols(); ++i) stacked.col(i) = snapshots[i];
  return inner_product_matrix(stacked);
}

/// Cumulative spectral energy fraction of the leading m eigenvalues.
inline double energy_ratio(const Vector& eigenvalues, int m) {
  const int n = static_cast<int>(eigenvalues.size());
  if (n < 1) throw ValidationError("energy_ratio: empty spectrum");
  if (m < 1 || m > n) throw ValidationError("energy_ratio: m out of range");
  const double total = eigenvalues.sum();
  const double scale = std::max(1.0, std::fabs(eigenvalues(0)));
  for (int i = 0; i < n; ++i) {
    if (eigenvalues(i) < -1e-10 * scale) throw ValidationError("energy_ratio: negative eigenvalue");
    if (i > 0 && eigenvalues(i) > eigenvalues(i - 1) + 1e-10 * scale) {
      throw ValidationError("energy_ratio: eigenvalues must be sorted descending");
    }
  }
  if (!(total > 0.0)) throw ValidationError("energy_ratio: zero total energy");
  return eigenvalues.head(m).sum() / total;
}

struct CpodOptions {
  double energy_target = 0.99;  // smallest truncation reaching this energy fraction
  bool center_snapshots = false;
  int idw_neighbors = 10;
  unsigned threads = 1;
  EigsOptions eigs;
};

struct VariableBasis {
  std::string name;
  Matrix modes;        // J x K_r, orthonormal columns on the common grid
  Vector eigenvalues;  // descending; the full computed spectrum, not just kept modes
  Vector mean;         // grand-mean snapshot when centering was on, else size 0
  double total_energy = 0.0;  // trace of the Gram matrix

  int count() const { return static_cast<int>(modes.cols()); }
  bool centered() const { return mean.size() > 0; }
};

struct CpodBasis {
  Grid common_grid;
  GeometryParams common_geometry;
  std::vector<VariableBasis> variables;
  int runs = 0;
  int steps = 0;

  ModeLayout layout() const {
    ModeLayout l;
    for (const auto& v : variables) {
      l.variables.push_back(v.name);
      l.counts.push_back(v.count());
    }
    return l;
  }
  int total_modes() const { return layout().total(); }
  const VariableBasis& variable(const std::string& name) const {
    for (const auto& v : variables) {
      if (v.name == name) return v;
    }
    throw ValidationError("basis: unknown variable '" + name + "'");
  }
};

/// Projection coefficients, one n x K slice per time step. Row i of slice t
/// holds run i's coefficients, variable blocks side by side in layout order.
struct CoefficientTensor {
  std::vector<Matrix> slices;

  int steps() const { return static_cast<int>(slices.size()); }
  int runs() const { return slices.empty() ? 0 : static_cast<int>(slices.front().rows()); }
  int modes() const { return slices.empty() ? 0 : static_cast<int>(slices.front().cols()); }
};

struct ExtractionResult {
  CpodBasis basis;
  CoefficientTensor coefficients;
  std::vector<std::string> warnings;
};

/// Joint decomposition across runs: every run is rescaled onto the common
/// grid, one Gram matrix per variable is built over all n*T snapshots, and
/// each variable keeps the smallest mode count whose spectral energy reaches
/// energy_target. maps[i] must take run i's coordinates onto the common
/// geometry.
inline ExtractionResult extract_basis(const std::vector<SnapshotEnsemble>& runs,
                                      const std::vector<PiecewiseAffineMap>& maps,
                                      const Grid& common_grid, const GeometryParams& common_geometry,
                                      const CpodOptions& opts = {}) {
  if (runs.empty()) throw ValidationError("extract_basis: no runs");
  if (maps.size() != runs.size()) throw ValidationError("extract_basis: one rescale map per run required");
  if (!(opts.energy_target > 0.0) || opts.energy_target > 1.0) {
    throw ValidationError("extract_basis: energy_target must lie in (0, 1]");
  }
  validate(common_grid);
  for (const auto& run : runs) validate(run);

  const int n = static_cast<int>(runs.size());
  const int steps = runs.front().steps();
  const auto& variables = runs.front().variables;
  for (const auto& run : runs) {
    if (run.steps() != steps) throw ValidationError("extract_basis: runs disagree on time step count");
    if (run.variables != variables) throw ValidationError("extract_basis: runs disagree on variables");
  }

  const int j_common = common_grid.size();
  const int n_snapshots = n * steps;

  std::vector<IdwPlan> plans(n);
  parallel_for(static_cast<std::size_t>(n), opts.threads, [&](std::size_t i) {
    const Grid rescaled = maps[i].apply(runs[i].grid);
    plans[i] = build_idw_plan(rescaled, common_grid, opts.idw_neighbors);
  });

  ExtractionResult result;
  result.basis.common_grid = common_grid;
  result.basis.common_geometry = common_geometry;
  result.basis.runs = n;
  result.basis.steps = steps;
  result.coefficients.slices.assign(steps, Matrix());

  std::vector<Matrix> coefficient_blocks(variables.size());  // K_r x (n*steps) each

  for (std::size_t r = 0; r < variables.size(); ++r) {
    Matrix snapshots(j_common, n_snapshots);
    parallel_for(static_cast<std::size_t>(n), opts.threads, [&](std::size_t i) {
      for (int t = 0; t < steps; ++t) {
        snapshots.col(t * n + static_cast<int>(i)) =
            apply_idw_plan(plans[i], runs[i].fields[r].col(t));
      }
    });

    VariableBasis vb;
    vb.name = variables[r];
    if (opts.center_snapshots) {
      vb.mean = snapshots.rowwise().mean();
      snapshots.colwise() -= vb.mean;
    }
    vb.total_energy = snapshots.squaredNorm();

    if (vb.total_energy <= 1e-280) {
      result.warnings.push_back("variable '" + vb.name + "' carries no energy; kept 0 modes");
      vb.modes.resize(j_common, 0);
      vb.eigenvalues.resize(0);
      coefficient_blocks[r].resize(0, n_snapshots);
      result.basis.variables.push_back(std::move(vb));
      continue;
    }

    const Matrix gram = inner_product_matrix(snapshots);
    // grow the solved spectrum until the energy target is reached; the dense
    // path below the solver threshold delivers everything at once
    int request = std::min(n_snapshots, std::max(16, 2 * n));
    if (n_snapshots <= opts.eigs.dense_threshold) request = n_snapshots;
    EigsResult eigs;
    int truncated = 0;
    while (true) {
      eigs = leading_eigenpairs(gram, request, opts.eigs);
      const double scale = std::max(eigs.values(0), 0.0);
      double cumulative = 0.0;
      truncated = 0;
      for (int k = 0; k < request; ++k) {
        if (eigs.values(k) <= 1e-12 * scale) break;  // numerical rank reached
        cumulative += eigs.values(k);
        ++truncated;
        if (cumulative >= opts.energy_target * vb.total_energy * (1.0 - 1e-12)) break;
      }
      const double reached = eigs.values.head(std::max(truncated, 1)).sum() / vb.total_energy;
      if (truncated < request || request == n_snapshots ||
          reached >= opts.energy_target * (1.0 - 1e-12)) {
        break;
      }
      request = std::min(n_snapshots, 2 * request);
    }

    vb.eigenvalues = eigs.values.cwiseMax(0.0);
    vb.modes = snapshots * eigs.vectors.leftCols(truncated);
    for (int k = 0; k < truncated; ++k) {
      const double norm = vb.modes.col(k).norm();
      if (!(norm > 0.0)) throw NumericalError("extract_basis: degenerate mode " + std::to_string(k));
      vb.modes.col(k) /= norm;
    }
    const Matrix gram_check = vb.modes.transpose() * vb.modes;
    if ((gram_check - Matrix::Identity(truncated, truncated)).cwiseAbs().maxCoeff() > 1e-8) {
      throw NumericalError("extract_basis: modes of '" + vb.name + "' lost orthonormality");
    }

    coefficient_blocks[r] = vb.modes.transpose() * snapshots;
    result.basis.variables.push_back(std::move(vb));
  }

  const ModeLayout layout = result.basis.layout();
  const int total_modes = layout.total();
  for (int t = 0; t < steps; ++t) {
    Matrix slice(n, total_modes);
    for (std::size_t r = 0; r < variables.size(); ++r) {
      const int off = layout.offset(static_cast<int>(r));
      for (int i = 0; i < n; ++i) {
        slice.block(i, off, 1, layout.counts[r]) =
            coefficient_blocks[r].col(t * n + i).transpose();
      }
    }
    result.coefficients.slices[t] = std::move(slice);
  }
  return result;
}

}  // namespace flowemu
