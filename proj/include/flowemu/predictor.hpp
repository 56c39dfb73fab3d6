#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "flowemu/cokrige.hpp"
#include "flowemu/cpod.hpp"
#include "flowemu/geometry.hpp"
#include "flowemu/interpolate.hpp"
#include "flowemu/parallel.hpp"

namespace flowemu {

/// Mean and pointwise variance fields on a target grid, one column per time
/// step, variables in basis order. Variances are clamped at zero on report.
struct PredictedField {
  struct VariableField {
    std::string name;
    Matrix mean;      // J_target x T
    Matrix variance;  // J_target x T
  };

  Grid grid;
  std::vector<VariableField> variables;
  bool extrapolated = false;  // the queried point fell outside the training hull

  const VariableField& variable(const std::string& name) const {
    for (const auto& v : variables) {
      if (v.name == name) return v;
    }
    throw ValidationError("prediction: unknown variable '" + name + "'");
  }
};

struct PredictOptions {
  int idw_neighbors = 10;
  unsigned threads = 1;
  // turns a raw geometry into the models' unit-box design coordinates; only
  // the GeometryParams overloads consult it
  DesignScaling scaling = DesignScaling::from_ranges();
};

namespace detail {

inline void check_models(const CpodBasis& basis, const std::vector<GpModelSlice>& models) {
  if (models.empty()) throw ValidationError("predict: no fitted time-step models");
  const int k_total = basis.total_modes();
  for (std::size_t t = 0; t < models.size(); ++t) {
    if (models[t].modes() != k_total) {
      throw ValidationError("predict: model at step " + std::to_string(t) + " covers " +
                            std::to_string(models[t].modes()) + " modes, basis holds " +
                            std::to_string(k_total));
    }
  }
  if (basis.steps > 0 && static_cast<int>(models.size()) != basis.steps) {
    throw ValidationError("predict: " + std::to_string(models.size()) + " models for " +
                          std::to_string(basis.steps) + " time steps");
  }
}

struct MappedBasis {
  std::vector<Matrix> modes;  // per variable, J_target x K_r
  std::vector<Vector> means;  // per variable; empty unless extraction centered
};

/// Transports the basis onto the target grid: target points are pulled into
/// the common frame and the common-grid columns interpolated there, the same
/// frame the extraction projected in.
inline MappedBasis map_basis(const CpodBasis& basis, const GeometryParams& target_geometry,
                             const Grid& target_grid, int idw_neighbors, unsigned threads) {
  const GeometryParams filled = with_extents_from(target_geometry, target_grid);
  const PiecewiseAffineMap to_common = build_rescale_map(filled, basis.common_geometry);
  const IdwPlan plan =
      build_idw_plan(basis.common_grid, to_common.apply(target_grid), idw_neighbors, threads);

  MappedBasis mapped;
  mapped.modes.resize(basis.variables.size());
  mapped.means.resize(basis.variables.size());
  for (std::size_t r = 0; r < basis.variables.size(); ++r) {
    const VariableBasis& vb = basis.variables[r];
    mapped.modes[r].resize(target_grid.size(), vb.count());
    for (int k = 0; k < vb.count(); ++k) {
      mapped.modes[r].col(k) = apply_idw_plan(plan, vb.modes.col(k));
    }
    if (vb.centered()) mapped.means[r] = apply_idw_plan(plan, vb.mean);
  }
  return mapped;
}

}  // namespace detail

/// Field prediction at a new design point. The mapped mode columns are
/// weighted by the per-step conditional coefficient means; the variance at a
/// point is the mode-squared sum of the conditional coefficient variances.
/// c_scaled lives in the models' unit-box design coordinates, while
/// target_geometry drives the zone-wise rescaling of the target grid.
inline PredictedField predict_flow(const CpodBasis& basis, const std::vector<GpModelSlice>& models,
                                   const Vector& c_scaled, const GeometryParams& target_geometry,
                                   const Grid& target_grid, const PredictOptions& options = {}) {
  validate(target_grid);
  detail::check_models(basis, models);
  if (c_scaled.size() != models.front().dims()) {
    throw ValidationError("predict: design point dimension does not match the fitted models");
  }

  const detail::MappedBasis mapped =
      detail::map_basis(basis, target_geometry, target_grid, options.idw_neighbors, options.threads);
  std::vector<Matrix> squared(mapped.modes.size());
  for (std::size_t r = 0; r < mapped.modes.size(); ++r) squared[r] = mapped.modes[r].cwiseAbs2();

  const ModeLayout layout = basis.layout();
  const int j_target = target_grid.size();
  const int t_steps = static_cast<int>(models.size());

  PredictedField out;
  out.grid = target_grid;
  out.extrapolated = !models.front().in_design_hull(c_scaled);
  out.variables.resize(basis.variables.size());
  for (std::size_t r = 0; r < basis.variables.size(); ++r) {
    out.variables[r].name = basis.variables[r].name;
    out.variables[r].mean = Matrix::Zero(j_target, t_steps);
    out.variables[r].variance = Matrix::Zero(j_target, t_steps);
  }

  parallel_for(static_cast<std::size_t>(t_steps), options.threads, [&](std::size_t t) {
    const GpModelSlice::Prediction pred = models[t].predict(c_scaled);
    for (std::size_t r = 0; r < mapped.modes.size(); ++r) {
      auto& field = out.variables[r];
      if (mapped.means[r].size() > 0) field.mean.col(t) = mapped.means[r];
      const int count = layout.counts[r];
      if (count == 0) continue;
      const int off = layout.offset(static_cast<int>(r));
      field.mean.col(t) += mapped.modes[r] * pred.mean.segment(off, count);
      field.variance.col(t) =
          (squared[r] * pred.cov.diagonal().segment(off, count)).cwiseMax(0.0);
    }
  });
  return out;
}

/// Convenience overload: the queried geometry supplies both the design point
/// (through options.scaling) and the grid rescaling.
inline PredictedField predict_flow(const CpodBasis& basis, const std::vector<GpModelSlice>& models,
                                   const GeometryParams& c_new, const Grid& target_grid,
                                   const PredictOptions& options = {}) {
  return predict_flow(basis, models, options.scaling.scale(design_from_geometry(c_new)), c_new,
                      target_grid, options);
}

/// Variance block of predict_flow, per variable in basis order.
inline std::vector<Matrix> flow_variance(const CpodBasis& basis,
                                         const std::vector<GpModelSlice>& models,
                                         const Vector& c_scaled, const GeometryParams& target_geometry,
                                         const Grid& target_grid, const PredictOptions& options = {}) {
  const PredictedField field =
      predict_flow(basis, models, c_scaled, target_geometry, target_grid, options);
  std::vector<Matrix> out;
  out.reserve(field.variables.size());
  for (const auto& v : field.variables) out.push_back(v.variance);
  return out;
}

inline std::vector<Matrix> flow_variance(const CpodBasis& basis,
                                         const std::vector<GpModelSlice>& models,
                                         const GeometryParams& c_new, const Grid& target_grid,
                                         const PredictOptions& options = {}) {
  return flow_variance(basis, models, options.scaling.scale(design_from_geometry(c_new)), c_new,
                       target_grid, options);
}

/// Region-summed mean relative error per time step, in percent:
/// 100 * sum |sim - pred| / sum |sim| over the region's point rows.
inline Vector mre(const Matrix& sim, const Matrix& pred, const std::vector<int>& region) {
  if (sim.rows() != pred.rows() || sim.cols() != pred.cols()) {
    throw ValidationError("mre: field shapes disagree");
  }
  if (region.empty()) throw ValidationError("mre: empty region");
  for (int j : region) {
    if (j < 0 || j >= sim.rows()) {
      throw ValidationError("mre: region index " + std::to_string(j) + " out of range");
    }
  }
  Vector out(sim.cols());
  for (int t = 0; t < sim.cols(); ++t) {
    double num = 0.0, den = 0.0;
    for (int j : region) {
      num += std::fabs(sim(j, t) - pred(j, t));
      den += std::fabs(sim(j, t));
    }
    if (!(den > 0.0)) {
      throw NumericalError("mre: reference field vanishes over the region at time step " +
                           std::to_string(t));
    }
    out(t) = 100.0 * num / den;
  }
  return out;
}

}  // namespace flowemu
