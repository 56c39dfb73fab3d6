#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "flowemu/common.hpp"
#include "flowemu/cpod.hpp"

namespace flowemu {

using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Pairs of modes belonging to the same variable may not couple through the
/// precision matrix (their sample correlation is an artifact of shared
/// orthogonal modes). true = forbidden entry.
inline BoolMatrix within_variable_mask(const ModeLayout& layout) {
  const int k = layout.total();
  BoolMatrix forbidden = BoolMatrix::Constant(k, k, false);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      if (i != j && layout.same_variable(i, j)) forbidden(i, j) = true;
    }
  }
  return forbidden;
}

inline BoolMatrix no_mask(int k) { return BoolMatrix::Constant(k, k, false); }

struct GlassoOptions {
  double tol = 1e-8;    // KKT residual target
  int max_sweeps = 2000;
};

struct GlassoResult {
  Matrix covariance;   // W, the estimated covariance
  Matrix precision;    // Theta = W^-1 with exact zeros where soft-thresholded or masked
  int sweeps = 0;
  double kkt_residual = 0.0;
};

namespace detail {

inline double soft_threshold(double x, double lambda) {
  if (x > lambda) return x - lambda;
  if (x < -lambda) return x + lambda;
  return 0.0;
}

/// Stationarity violation of the ell-1 penalized log-determinant objective at
/// Theta: the gradient of the smooth part is S - Theta^-1, and each unmasked
/// entry must sit inside (or on) the subgradient interval of lambda*|theta|.
inline double glasso_kkt_residual(const Matrix& s, const Matrix& theta, double lambda,
                                  const BoolMatrix& forbidden) {
  const int k = static_cast<int>(s.rows());
  Eigen::LLT<Matrix> llt(theta);
  if (llt.info() != Eigen::Success) return std::numeric_limits<double>::infinity();
  const Matrix grad = s - llt.solve(Matrix::Identity(k, k));
  double worst = 0.0;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      if (i != j && forbidden(i, j)) continue;
      const double g = grad(i, j);
      const double violation = theta(i, j) != 0.0
                                   ? std::fabs(g + lambda * (theta(i, j) > 0.0 ? 1.0 : -1.0))
                                   : std::max(0.0, std::fabs(g) - lambda);
      worst = std::max(worst, violation);
    }
  }
  return worst;
}

}  // namespace detail

/// Graphical LASSO with entry masking: minimizes
///   -log det Theta + tr(S Theta) + lambda * ||Theta||_1
/// over symmetric positive-definite Theta with masked entries pinned to 0,
/// by the column-wise lasso coordinate descent of Friedman et al. The
/// penalty covers the diagonal, so the covariance estimate W carries
/// diag(W) = diag(S) + lambda. Accepts singular PSD S when lambda > 0.
/// Stops when the stationarity residual falls below tol * max(1, max|S_ij|):
/// the residual has the units of S, and for badly scaled inputs (smoothness
/// near 1 whitens covariances up by the correlation condition number) an
/// absolute target below the scale's own rounding noise can never be met.
inline GlassoResult glasso(const Matrix& s, double lambda, const BoolMatrix& forbidden,
                           const GlassoOptions& opts = {}) {
  const int k = static_cast<int>(s.rows());
  if (s.cols() != k || k < 1) throw ValidationError("glasso: S must be square and nonempty");
  const double s_scale = std::max(1.0, s.cwiseAbs().maxCoeff());
  if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-10 * s_scale) {
    throw ValidationError("glasso: S must be symmetric");
  }
  if (forbidden.rows() != k || forbidden.cols() != k) {
    throw ValidationError("glasso: mask shape must match S");
  }
  if (!(lambda >= 0.0)) throw ValidationError("glasso: lambda must be nonnegative");
  {
    Eigen::SelfAdjointEigenSolver<Matrix> es(s);
    if (es.eigenvalues().minCoeff() < -1e-10 * s_scale) {
      throw ValidationError("glasso: S is not positive semidefinite");
    }
  }

  Matrix w = s + lambda * Matrix::Identity(k, k);
  Matrix betas = Matrix::Zero(k, k);  // column j: the lasso coefficients for column j

  GlassoResult result;
  if (k == 1) {
    result.covariance = w;
    result.precision = Matrix::Constant(1, 1, 1.0 / w(0, 0));
    result.kkt_residual = 0.0;
    return result;
  }

  auto recover_precision = [&]() {
    Matrix theta = Matrix::Zero(k, k);
    for (int j = 0; j < k; ++j) {
      double dot = 0.0;
      for (int i = 0; i < k; ++i) {
        if (i != j) dot += w(i, j) * betas(i, j);
      }
      const double denom = w(j, j) - dot;
      if (!(denom > 0.0)) {
        throw NumericalError("glasso: precision recovery hit a nonpositive pivot in column " +
                             std::to_string(j));
      }
      theta(j, j) = 1.0 / denom;
      for (int i = 0; i < k; ++i) {
        if (i != j) theta(i, j) = -betas(i, j) / denom;
      }
    }
    // symmetrize values but keep structural zeros exact: an entry is zero
    // only when both column solves agree it is
    for (int i = 0; i < k; ++i) {
      for (int j = i + 1; j < k; ++j) {
        if (theta(i, j) == 0.0 && theta(j, i) == 0.0) continue;
        const double avg = 0.5 * (theta(i, j) + theta(j, i));
        theta(i, j) = avg;
        theta(j, i) = avg;
      }
    }
    return theta;
  };

  double inner_tol = 1e-4 * std::max(s_scale, lambda);
  for (int sweep = 1; sweep <= opts.max_sweeps; ++sweep) {
    double w_change = 0.0;
    for (int j = 0; j < k; ++j) {
      // coordinate descent on: min 1/2 b' W11 b - s12' b + lambda |b|_1
      for (int pass = 0; pass < 200; ++pass) {
        double b_change = 0.0;
        for (int i = 0; i < k; ++i) {
          if (i == j) continue;
          const double old = betas(i, j);
          if (forbidden(i, j)) {
            betas(i, j) = 0.0;
            continue;
          }
          double partial = s(i, j);
          for (int l = 0; l < k; ++l) {
            if (l != j && l != i) partial -= w(i, l) * betas(l, j);
          }
          const double updated = detail::soft_threshold(partial, lambda) / w(i, i);
          betas(i, j) = updated;
          b_change = std::max(b_change, std::fabs(updated - old) * w(i, i));
        }
        if (b_change <= inner_tol) break;
      }
      for (int i = 0; i < k; ++i) {
        if (i == j) continue;
        double w_new = 0.0;
        for (int l = 0; l < k; ++l) {
          if (l != j) w_new += w(i, l) * betas(l, j);
        }
        w_change = std::max(w_change, std::fabs(w_new - w(i, j)));
        w(i, j) = w_new;
        w(j, i) = w_new;
      }
    }

    if (w_change <= inner_tol) {
      const Matrix theta = recover_precision();
      const double kkt = detail::glasso_kkt_residual(s, theta, lambda, forbidden);
      if (kkt <= opts.tol * s_scale) {
        result.covariance = w;
        result.precision = theta;
        result.sweeps = sweep;
        result.kkt_residual = kkt;
        return result;
      }
      inner_tol *= 0.1;  // converged under the working tolerance but KKT says tighten
      if (inner_tol < 1e-300) break;
    }
  }
  throw NumericalError("glasso: KKT residual failed to reach " + std::to_string(opts.tol) +
                       " within " + std::to_string(opts.max_sweeps) + " sweeps");
}

/// Number of distinct unmasked off-diagonal pairs carrying a nonzero
/// precision entry: the "edges" of the coupling graph.
inline int count_offmask_edges(const Matrix& precision, const BoolMatrix& forbidden) {
  int edges = 0;
  for (int i = 0; i < precision.rows(); ++i) {
    for (int j = i + 1; j < precision.cols(); ++j) {
      if (!forbidden(i, j) && precision(i, j) != 0.0) ++edges;
    }
  }
  return edges;
}

}  // namespace flowemu
