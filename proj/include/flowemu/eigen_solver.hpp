#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "flowemu/common.hpp"
#include "flowemu/rng.hpp"

namespace flowemu {

struct EigsOptions {
  enum class Method { Auto, Dense, Krylov };
  Method method = Method::Auto;
  int dense_threshold = 512;  // Auto solves this order and below densely
  double tol = 1e-8;          // residual bound, relative to the largest eigenvalue
  int max_restarts = 500;
  std::uint64_t seed = 0x2545f4914f6cdd1dull;
};

struct EigsResult {
  Vector values;   // descending
  Matrix vectors;  // orthonormal columns, one per value
  int restarts = 0;
  bool dense_path = false;
};

namespace detail {

inline void check_symmetric(const Matrix& a) {
  if (a.rows() != a.cols()) throw ValidationError("eigensolver: matrix must be square");
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale) {
    throw ValidationError("eigensolver: matrix is not symmetric");
  }
}

inline EigsResult dense_leading(const Matrix& a, int count) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver(0.5 * (a + a.transpose()));
  if (solver.info() != Eigen::Success) throw NumericalError("eigensolver: dense decomposition failed");
  const int n = static_cast<int>(a.rows());
  EigsResult result;
  result.dense_path = true;
  result.values.resize(count);
  result.vectors.resize(n, count);
  for (int i = 0; i < count; ++i) {
    result.values(i) = solver.eigenvalues()(n - 1 - i);  // ascending -> descending
    result.vectors.col(i) = solver.eigenvectors().col(n - 1 - i);
  }
  return result;
}

}  // namespace detail

/// Leading eigenpairs of a symmetric PSD matrix. Small problems go through a
/// dense solve; larger ones use a restarted Krylov (Lanczos-type) iteration
/// with full reorthogonalization and thick restarts, iterated until every
/// requested pair satisfies |A v - lambda v| <= tol * lambda_max.
inline EigsResult leading_eigenpairs(const Matrix& a, int count, const EigsOptions& opts = {}) {
  detail::check_symmetric(a);
  const int n = static_cast<int>(a.rows());
  if (count < 1 || count > n) {
    throw ValidationError("eigensolver: requested " + std::to_string(count) +
                          " eigenpairs from an order-" + std::to_string(n) + " matrix");
  }

  const bool dense = opts.method == EigsOptions::Method::Dense ||
                     (opts.method == EigsOptions::Method::Auto && n <= opts.dense_threshold);
  if (dense || count >= n - 1) return detail::dense_leading(a, count);

  const Matrix sym = 0.5 * (a + a.transpose());
  const int subspace = std::min(n, std::max(2 * count + 16, 32));
  const int keep = std::min(subspace - 2, 2 * count + 8);
  const double breakdown = 1e-14 * std::max(1.0, sym.cwiseAbs().maxCoeff());

  Rng rng(opts.seed);
  Matrix basis(n, subspace);
  Matrix projected = Matrix::Zero(subspace, subspace);  // basis' * A * basis

  auto random_unit = [&](int orthogonal_to) {
    Vector v(n);
    for (int i = 0; i < n; ++i) v(i) = rng.normal();
    for (int pass = 0; pass < 2; ++pass) {
      if (orthogonal_to > 0) {
        v -= basis.leftCols(orthogonal_to) * (basis.leftCols(orthogonal_to).transpose() * v);
      }
    }
    const double norm = v.norm();
    if (norm < 1e-12) throw NumericalError("eigensolver: could not draw a fresh start vector");
    return Vector(v / norm);
  };

  basis.col(0) = random_unit(0);
  int active = 1;
  EigsResult result;

  for (int restart = 0; restart <= opts.max_restarts; ++restart) {
    // expand to the full subspace, maintaining projected = basis' A basis
    while (active < subspace) {
      Vector w = sym * basis.col(active - 1);
      Vector coeffs = basis.leftCols(active).transpose() * w;
      w -= basis.leftCols(active) * coeffs;
      const Vector correction = basis.leftCols(active).transpose() * w;  // second pass
      w -= basis.leftCols(active) * correction;
      coeffs += correction;
      projected.col(active - 1).head(active) = coeffs;
      projected.row(active - 1).head(active) = coeffs.transpose();

      const double beta = w.norm();
      basis.col(active) = beta > breakdown ? Vector(w / beta) : random_unit(active);
      ++active;
    }
    // the last column needs its diagonal block too; its orthogonalized
    // image is the next Lanczos direction, saved to continue after a restart
    Vector continuation;
    {
      Vector w = sym * basis.col(active - 1);
      Vector coeffs = basis.leftCols(active).transpose() * w;
      w -= basis.leftCols(active) * coeffs;
      const Vector correction = basis.leftCols(active).transpose() * w;
      w -= basis.leftCols(active) * correction;
      coeffs += correction;
      projected.col(active - 1).head(active) = coeffs;
      projected.row(active - 1).head(active) = coeffs.transpose();
      const double beta = w.norm();
      if (beta > breakdown) continuation = w / beta;
    }

    Eigen::SelfAdjointEigenSolver<Matrix> small(
        0.5 * (projected.topLeftCorner(active, active) +
               projected.topLeftCorner(active, active).transpose()));
    if (small.info() != Eigen::Success) throw NumericalError("eigensolver: projected solve failed");

    Matrix ritz_vectors(n, keep);
    Vector ritz_values(keep);
    for (int i = 0; i < keep; ++i) {
      ritz_values(i) = small.eigenvalues()(active - 1 - i);
      ritz_vectors.col(i) = basis.leftCols(active) * small.eigenvectors().col(active - 1 - i);
    }

    const double lambda_max = std::max(ritz_values(0), 0.0);
    const double bound = opts.tol * std::max(lambda_max, breakdown);
    bool converged = true;
    Vector residuals(count);
    for (int i = 0; i < count; ++i) {
      residuals(i) = (sym * ritz_vectors.col(i) - ritz_values(i) * ritz_vectors.col(i)).norm();
      if (residuals(i) > bound) converged = false;
    }

    if (converged) {
      result.values = ritz_values.head(count);
      result.vectors = ritz_vectors.leftCols(count);
      result.restarts = restart;
      return result;
    }
    if (restart == opts.max_restarts) {
      std::string norms;
      for (int i = 0; i < count; ++i) norms += (i ? ", " : "") + std::to_string(residuals(i));
      throw NumericalError("eigensolver: no convergence after " + std::to_string(restart) +
                           " restarts; residual norms [" + norms + "] exceed " +
                           std::to_string(bound));
    }

    // thick restart: keep the best Ritz vectors, then re-expand. Two details
    // are load-bearing. The kept block of the projected matrix is recomputed
    // explicitly (seeding it as diag(ritz_values) caps the attainable
    // residual at the current error level and stalls). And the expansion
    // resumes from the saved Lanczos direction, not a random vector, so the
    // effective filter polynomial keeps deepening across restarts; a random
    // restart crawls on spectra whose leading eigenvalues crowd together.
    basis.leftCols(keep) =
        Eigen::HouseholderQR<Matrix>(ritz_vectors).householderQ() * Matrix::Identity(n, keep);
    projected.setZero();
    const Matrix kept_block =
        basis.leftCols(keep).transpose() * (sym * basis.leftCols(keep));
    projected.topLeftCorner(keep, keep) = 0.5 * (kept_block + kept_block.transpose());
    if (continuation.size() == n) {
      Vector v = continuation;
      for (int pass = 0; pass < 2; ++pass) {
        v -= basis.leftCols(keep) * (basis.leftCols(keep).transpose() * v);
      }
      const double norm = v.norm();
      basis.col(keep) = norm > breakdown ? Vector(v / norm) : random_unit(keep);
    } else {
      basis.col(keep) = random_unit(keep);
    }
    active = keep + 1;
  }
  throw NumericalError("eigensolver: unreachable");
}

/// Largest principal angle (radians) between the column spans of two
/// orthonormal bases of equal rank. Eigenvalue clusters make individual
/// vectors ambiguous, so comparisons go through this.
inline double largest_principal_angle(const Matrix& u, const Matrix& v) {
  if (u.rows() != v.rows() || u.cols() != v.cols() || u.cols() == 0) {
    throw ValidationError("principal angle: bases must agree in shape");
  }
  Eigen::JacobiSVD<Matrix> svd(u.transpose() * v);
  const double cos_angle = std::clamp(svd.singularValues().minCoeff(), -1.0, 1.0);
  return std::acos(cos_angle);
}

}  // namespace flowemu
