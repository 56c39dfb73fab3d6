#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "flowemu/common.hpp"
#include "flowemu/geometry.hpp"
#include "flowemu/stats.hpp"

namespace flowemu {

/// Affine map taking raw design coordinates onto [0,1]^p. The kernel's
/// smoothness parameters only have meaningful (0,1) bounds on a normalized
/// domain, so every design enters the model scaled.
struct DesignScaling {
  Vector lo, hi;

  int dims() const { return static_cast<int>(lo.size()); }

  Vector scale(const Vector& raw) const {
    if (raw.size() != lo.size()) throw ValidationError("design scaling: dimension mismatch");
    return (raw - lo).cwiseQuotient(hi - lo);
  }
  Matrix scale_rows(const Matrix& raw) const {
    Matrix out(raw.rows(), raw.cols());
    for (int i = 0; i < raw.rows(); ++i) out.row(i) = scale(raw.row(i).transpose()).transpose();
    return out;
  }

  /// The five catalog parameters in their canonical order: length,
  /// nozzle_radius, inlet_diameter, injection_angle, inlet_distance.
  static DesignScaling from_ranges(const ParameterRanges& r = {}) {
    DesignScaling s;
    s.lo.resize(5);
    s.hi.resize(5);
    s.lo << r.length_min, r.nozzle_radius_min, r.inlet_diameter_min, r.injection_angle_min,
        r.inlet_distance_min;
    s.hi << r.length_max, r.nozzle_radius_max, r.inlet_diameter_max, r.injection_angle_max,
        r.inlet_distance_max;
    return s;
  }
  static DesignScaling identity(int dims) {
    DesignScaling s;
    s.lo = Vector::Zero(dims);
    s.hi = Vector::Ones(dims);
    return s;
  }
};

inline void validate(const DesignScaling& s) {
  if (s.lo.size() != s.hi.size() || s.lo.size() < 1) {
    throw ValidationError("design scaling: bounds must share a positive dimension");
  }
  for (int j = 0; j < s.lo.size(); ++j) {
    if (!(s.hi(j) > s.lo(j))) {
      throw ValidationError("design scaling: min must be below max in dimension " +
                            std::to_string(j));
    }
  }
}

inline Vector design_from_geometry(const GeometryParams& g) {
  Vector c(5);
  c << g.length, g.nozzle_radius, g.inlet_diameter, g.injection_angle, g.inlet_distance;
  return c;
}

namespace detail {

inline void check_tau(const Vector& tau) {
  if (tau.size() < 1) throw ValidationError("correlation: empty smoothness vector");
  for (int j = 0; j < tau.size(); ++j) {
    if (!(tau(j) > 0.0) || !(tau(j) < 1.0)) {
      throw ValidationError("correlation: tau must lie strictly inside (0,1), got " +
                            std::to_string(tau(j)) + " in dimension " + std::to_string(j));
    }
  }
}

}  // namespace detail

/// Separable product correlation r(c1, c2) = prod_j tau_j^{4 (c1_j - c2_j)^2}.
/// Equivalent to the Gaussian kernel exp(-sum_j theta_j d_j^2) under
/// theta_j = -4 log tau_j; the tau form keeps every parameter in (0,1).
inline double correlation(const Vector& tau, const Vector& c1, const Vector& c2) {
  detail::check_tau(tau);
  if (c1.size() != tau.size() || c2.size() != tau.size()) {
    throw ValidationError("correlation: point dimension does not match tau");
  }
  double log_r = 0.0;
  for (int j = 0; j < tau.size(); ++j) {
    const double d = c1(j) - c2(j);
    log_r += 4.0 * d * d * std::log(tau(j));
  }
  return std::exp(log_r);
}

/// n x n correlation matrix over scaled design rows. Unit diagonal by
/// construction, symmetric by construction.
inline Matrix correlation_matrix(const Vector& tau, const Matrix& designs) {
  detail::check_tau(tau);
  if (designs.cols() != tau.size()) {
    throw ValidationError("correlation: design dimension does not match tau");
  }
  const int n = static_cast<int>(designs.rows());
  Matrix r = Matrix::Identity(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double v = correlation(tau, designs.row(i).transpose(), designs.row(j).transpose());
      r(i, j) = v;
      r(j, i) = v;
    }
  }
  return r;
}

inline Vector correlation_vector(const Vector& tau, const Matrix& designs, const Vector& c_new) {
  Vector r(designs.rows());
  for (int i = 0; i < designs.rows(); ++i) {
    r(i) = correlation(tau, designs.row(i).transpose(), c_new);
  }
  return r;
}

struct CorrelationFactor {
  Eigen::LLT<Matrix> llt;
  double jitter = 0.0;  // diagonal boost that made the factorization succeed
};

/// Cholesky of a correlation matrix with an escalating diagonal jitter:
/// clean first, then 1e-10 through 1e-6 in decades. Designs are only used
/// for the failure diagnostic, which names the closest pair of points.
inline CorrelationFactor factor_correlation(const Matrix& r, const Matrix& designs) {
  CorrelationFactor f;
  f.llt.compute(r);
  if (f.llt.info() == Eigen::Success) return f;
  for (double jitter = 1e-10; jitter <= 1.0000001e-6; jitter *= 10.0) {
    f.llt.compute(r + jitter * Matrix::Identity(r.rows(), r.cols()));
    if (f.llt.info() == Eigen::Success) {
      f.jitter = jitter;
      return f;
    }
  }
  int bi = 0, bj = 1;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < designs.rows(); ++i) {
    for (int j = i + 1; j < designs.rows(); ++j) {
      const double d = (designs.row(i) - designs.row(j)).norm();
      if (d < best) {
        best = d;
        bi = i;
        bj = j;
      }
    }
  }
  throw NumericalError("correlation matrix stayed singular up to jitter 1e-6; nearest design "
                       "points are rows " +
                       std::to_string(bi) + " and " + std::to_string(bj) + " at distance " +
                       std::to_string(best));
}

/// One time step's fitted co-kriging model: mean mu, cross-covariance T over
/// all modes, kernel parameters tau, and the training designs/coefficients.
/// Immutable once built; prediction is const and thread-safe.
class GpModelSlice {
 public:
  GpModelSlice() = default;

  /// designs must already be scaled to the unit box; coeffs is n x K with
  /// row i holding run i's coefficient vector.
  GpModelSlice(Vector mu, Matrix t_cov, Vector tau, Matrix designs, Matrix coeffs)
      : mu_(std::move(mu)),
        t_cov_(std::move(t_cov)),
        tau_(std::move(tau)),
        designs_(std::move(designs)),
        coeffs_(std::move(coeffs)) {
    detail::check_tau(tau_);
    const int n = static_cast<int>(designs_.rows());
    const int k = static_cast<int>(mu_.size());
    if (n < 1) throw ValidationError("gp slice: at least one training run required");
    if (designs_.cols() != tau_.size()) throw ValidationError("gp slice: design/tau dimension mismatch");
    if (coeffs_.rows() != n || coeffs_.cols() != k) {
      throw ValidationError("gp slice: coefficient matrix must be runs x modes");
    }
    if (t_cov_.rows() != k || t_cov_.cols() != k) {
      throw ValidationError("gp slice: covariance must be modes x modes");
    }
    const double t_scale = std::max(1.0, t_cov_.cwiseAbs().maxCoeff());
    if ((t_cov_ - t_cov_.transpose()).cwiseAbs().maxCoeff() > 1e-8 * t_scale) {
      throw ValidationError("gp slice: covariance is not symmetric");
    }
    t_llt_.compute(0.5 * (t_cov_ + t_cov_.transpose()));
    if (t_llt_.info() != Eigen::Success) {
      throw ValidationError("gp slice: covariance is not positive definite");
    }

    factor_ = factor_correlation(correlation_matrix(tau_, designs_), designs_);
    const Matrix centered = coeffs_.rowwise() - mu_.transpose();
    weights_ = factor_.llt.solve(centered);  // R^-1 (B - 1 mu')
  }

  int runs() const { return static_cast<int>(designs_.rows()); }
  int modes() const { return static_cast<int>(mu_.size()); }
  int dims() const { return static_cast<int>(tau_.size()); }
  const Vector& mu() const { return mu_; }
  const Matrix& t_cov() const { return t_cov_; }
  const Vector& tau() const { return tau_; }
  const Matrix& designs() const { return designs_; }
  const Matrix& coefficients() const { return coeffs_; }
  double jitter() const { return factor_.jitter; }

  struct Prediction {
    Vector mean;
    Matrix cov;
    double scale = 0.0;  // the (1 - r' R^-1 r) factor multiplying T
  };

  /// Conditional mean and covariance of the coefficient vector at a new
  /// scaled design point. The mean does not involve T at all, so it matches
  /// the fully independent model's predictor exactly.
  Prediction predict(const Vector& c_new) const {
    const Vector r = correlation_vector(tau_, designs_, c_new);
    const Vector alpha = factor_.llt.solve(r);
    double scale = 1.0 - r.dot(alpha);
    if (scale < -1e-10) {
      throw NumericalError("gp slice: negative predictive variance factor " +
                           std::to_string(scale));
    }
    scale = std::clamp(scale, 0.0, 1.0);

    Prediction out;
    out.mean = mu_ + weights_.transpose() * r;
    out.cov = scale * t_cov_;
    out.scale = scale;
    return out;
  }

  /// Whether beta_obs falls inside the highest-density confidence region at
  /// miss level alpha. The region is the ellipsoid
  ///   (beta - mean)' D^-1 (beta - mean) <= scale * chi2_K(1 - alpha)
  /// with D = diag(T) under the independence assumption, D = T otherwise.
  /// At a training point the scale is 0 and membership degenerates to exact
  /// equality with the interpolated mean.
  bool hdcr_contains(const Vector& c_new, const Vector& beta_obs, double alpha,
                     bool assume_independent) const {
    if (!(alpha > 0.0) || !(alpha < 1.0)) {
      throw ValidationError("hdcr: alpha must lie strictly inside (0,1)");
    }
    if (beta_obs.size() != mu_.size()) throw ValidationError("hdcr: observation dimension mismatch");
    const Prediction pred = predict(c_new);
    const Vector diff = beta_obs - pred.mean;
    double quad;
    if (assume_independent) {
      quad = diff.cwiseAbs2().cwiseQuotient(t_cov_.diagonal()).sum();
    } else {
      quad = diff.dot(t_llt_.solve(diff));
    }
    const double threshold =
        pred.scale * chi_squared_quantile(static_cast<double>(mu_.size()), 1.0 - alpha);
    return quad <= threshold;
  }

  /// Componentwise bounding box of the training designs; prediction outside
  /// it is extrapolation and callers may want to warn.
  bool in_design_hull(const Vector& c_new) const {
    for (int j = 0; j < designs_.cols(); ++j) {
      if (c_new(j) < designs_.col(j).minCoeff() || c_new(j) > designs_.col(j).maxCoeff()) {
        return false;
      }
    }
    return true;
  }

 private:
  Vector mu_;
  Matrix t_cov_;
  Vector tau_;
  Matrix designs_;
  Matrix coeffs_;
  CorrelationFactor factor_;
  Eigen::LLT<Matrix> t_llt_;
  Matrix weights_;
};

}  // namespace flowemu
