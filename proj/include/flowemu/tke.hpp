#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "flowemu/predictor.hpp"
#include "flowemu/wncq.hpp"

namespace flowemu {

struct TkeOptions {
  std::array<std::string, 3> velocity_variables{"u", "v", "w"};
  int idw_neighbors = 10;
  unsigned threads = 1;
};

enum class BandSide { lower, upper, two_sided };

/// One- or two-sided confidence interval; the side not being bounded stays
/// at infinity.
struct TkeBand {
  double lower = -std::numeric_limits<double>::infinity();
  double upper = std::numeric_limits<double>::infinity();
};

/// Pointwise turbulent-kinetic-energy prediction at a new design point. The
/// constructor interpolates the velocity mode rows onto the probe points and
/// caches every time step's conditional coefficient moments; the query
/// methods are read-only afterwards, so probes and steps can be swept from
/// several threads at once.
///
/// Time means enter every query as plain constants, mirroring the modeling
/// assumption that the long-run averages are fixed. window_time_mean builds
/// them from the predicted evolution over a fully developed window; callers
/// holding reference data can pass their own averages instead.
class TkeEvaluator {
 public:
  TkeEvaluator(const CpodBasis& basis, const std::vector<GpModelSlice>& models,
               const Vector& c_scaled, const GeometryParams& target_geometry, const Grid& probes,
               const TkeOptions& options = {})
      : probe_count_(probes.size()), step_count_(static_cast<int>(models.size())) {
    validate(probes);
    detail::check_models(basis, models);
    if (c_scaled.size() != models.front().dims()) {
      throw ValidationError("tke: design point dimension does not match the fitted models");
    }

    const detail::MappedBasis mapped =
        detail::map_basis(basis, target_geometry, probes, options.idw_neighbors, options.threads);
    const ModeLayout layout = basis.layout();
    for (int a = 0; a < 3; ++a) {
      const std::string& name = options.velocity_variables[a];
      int r = -1;
      for (std::size_t v = 0; v < basis.variables.size(); ++v) {
        if (basis.variables[v].name == name) r = static_cast<int>(v);
      }
      if (r < 0) {
        throw ValidationError("tke: velocity variable '" + name + "' missing from the basis");
      }
      rows_[a] = mapped.modes[r];
      base_[a] = mapped.means[r].size() > 0 ? mapped.means[r] : Vector::Zero(probes.size());
      offsets_[a] = layout.offset(r);
      counts_[a] = layout.counts[r];
    }

    predictions_.reserve(models.size());
    for (const auto& m : models) predictions_.push_back(m.predict(c_scaled));
  }

  int probe_count() const { return probe_count_; }
  int step_count() const { return step_count_; }

  /// 3x3 covariance of the velocity vector at the probe: the full velocity
  /// block of the conditional coefficient covariance, cross-variable terms
  /// included, squeezed through the interpolated mode rows.
  Eigen::Matrix3d phi_matrix(int probe, int t) const {
    check_query(probe, t);
    const Matrix& cov = predictions_[t].cov;
    Eigen::Matrix3d phi;
    for (int a = 0; a < 3; ++a) {
      for (int b = a; b < 3; ++b) {
        double value = 0.0;
        if (counts_[a] > 0 && counts_[b] > 0) {
          const Vector tmp = cov.block(offsets_[a], offsets_[b], counts_[a], counts_[b]) *
                             rows_[b].row(probe).transpose();
          value = rows_[a].row(probe).dot(tmp);
        }
        phi(a, b) = value;
        phi(b, a) = value;
      }
    }
    return phi;
  }

  /// Conditional mean of (u, v, w) at the probe.
  Eigen::Vector3d velocity_mean(int probe, int t) const {
    check_query(probe, t);
    Eigen::Vector3d y;
    for (int a = 0; a < 3; ++a) {
      double value = base_[a](probe);
      if (counts_[a] > 0) {
        value += rows_[a].row(probe).dot(predictions_[t].mean.segment(offsets_[a], counts_[a]));
      }
      y(a) = value;
    }
    return y;
  }

  /// Average predicted velocity over steps [t_begin, t_end), the plug-in
  /// stand-in for the long-run time average at the probe.
  Eigen::Vector3d window_time_mean(int probe, int t_begin, int t_end) const {
    if (t_begin < 0 || t_end > step_count_ || t_begin >= t_end) {
      throw ValidationError("tke: time window [" + std::to_string(t_begin) + ", " +
                            std::to_string(t_end) + ") is empty or out of range");
    }
    Eigen::Vector3d acc = Eigen::Vector3d::Zero();
    for (int t = t_begin; t < t_end; ++t) acc += velocity_mean(probe, t);
    return acc / (t_end - t_begin);
  }

  /// Pointwise energy prediction about the given time mean: half the squared
  /// mean fluctuation plus half the trace of phi. This is the mean of
  /// tke_distribution, the average of the quadratic form under the
  /// conditional law.
  double tke_predict(int probe, int t, const Eigen::Vector3d& time_mean) const {
    const Eigen::Vector3d d = velocity_mean(probe, t) - time_mean;
    return 0.5 * d.squaredNorm() + 0.5 * phi_matrix(probe, t).trace();
  }

  /// Exact conditional law of the fluctuation energy. Each eigendirection of
  /// phi with eigenvalue above 1e-12 of the largest contributes a
  /// (lambda/2)-weighted chi^2_1 whose noncentrality is the squared
  /// standardized mean component; the remaining directions are deterministic
  /// and fold into a constant offset. A rank-zero phi leaves the point mass
  /// at the plug-in energy.
  WncqDistribution tke_distribution(int probe, int t, const Eigen::Vector3d& time_mean) const {
    const Eigen::Matrix3d phi = phi_matrix(probe, t);
    const Eigen::Vector3d d = velocity_mean(probe, t) - time_mean;

    WncqDistribution dist;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(phi);
    const Eigen::Vector3d lambda = eig.eigenvalues();  // ascending
    if (!(lambda(2) > 0.0)) {
      dist.weights.resize(0);
      dist.noncentralities.resize(0);
      dist.offset = 0.5 * d.squaredNorm();
      return dist;
    }

    const double floor = 1e-12 * lambda(2);
    std::vector<double> weights, ncs;
    double offset = 0.0;
    for (int j = 2; j >= 0; --j) {
      const double proj = eig.eigenvectors().col(j).dot(d);
      if (lambda(j) > floor) {
        weights.push_back(0.5 * lambda(j));
        ncs.push_back(proj * proj / lambda(j));
      } else {
        offset += 0.5 * proj * proj;
      }
    }
    dist.weights = Eigen::Map<Vector>(weights.data(), static_cast<Eigen::Index>(weights.size()));
    dist.noncentralities = Eigen::Map<Vector>(ncs.data(), static_cast<Eigen::Index>(ncs.size()));
    dist.offset = offset;
    return dist;
  }

 private:
  void check_query(int probe, int t) const {
    if (probe < 0 || probe >= probe_count_) {
      throw ValidationError("tke: probe index " + std::to_string(probe) + " out of range");
    }
    if (t < 0 || t >= step_count_) {
      throw ValidationError("tke: time step " + std::to_string(t) + " out of range");
    }
  }

  int probe_count_ = 0;
  int step_count_ = 0;
  std::array<Matrix, 3> rows_;     // per velocity component, probe x mode
  std::array<Vector, 3> base_;     // centering means at the probes, else zero
  std::array<int, 3> offsets_{};   // coefficient block start per component
  std::array<int, 3> counts_{};    // coefficient block width per component
  std::vector<GpModelSlice::Prediction> predictions_;
};

/// Quantile band for the energy law: lower keeps the value exceeded with the
/// given confidence, upper the value respected with it, two_sided the
/// equal-tail pair bracketing exactly that probability. A degenerate law
/// returns its point mass on both sides whatever the level.
inline TkeBand tke_confidence_band(const WncqDistribution& dist, double level, BandSide side,
                                   const WncqOptions& options = {}) {
  validate(dist);
  if (!(level > 0.0) || !(level < 1.0)) {
    throw ValidationError("tke band: level must lie strictly inside (0,1)");
  }
  TkeBand band;
  if (dist.terms() == 0) {
    band.lower = dist.offset;
    band.upper = dist.offset;
    return band;
  }
  switch (side) {
    case BandSide::lower:
      band.lower = wncq_quantile(dist, 1.0 - level, options);
      break;
    case BandSide::upper:
      band.upper = wncq_quantile(dist, level, options);
      break;
    case BandSide::two_sided:
      band.lower = wncq_quantile(dist, 0.5 * (1.0 - level), options);
      band.upper = wncq_quantile(dist, 0.5 * (1.0 + level), options);
      break;
  }
  return band;
}

}  // namespace flowemu
