#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "flowemu/cokrige.hpp"
#include "flowemu/common.hpp"
#include "flowemu/cpod.hpp"
#include "flowemu/design.hpp"
#include "flowemu/glasso.hpp"
#include "flowemu/lbfgs.hpp"
#include "flowemu/parallel.hpp"

namespace flowemu {

struct FitConfig {
  double lambda = 0.1;
  int n_starts = 8;
  int max_bcd_iters = 60;
  double bcd_tol = 1e-8;
  double glasso_tol = 1e-8;
  double lbfgs_tol = 1e-8;
  int lbfgs_memory = 8;
  uint64_t seed = 0;                  // scrambles the extra smoothness starts
  bool mask_within_variable = true;   // forbid precision edges between modes of one variable
};

inline void validate(const FitConfig& config) {
  if (!(config.lambda >= 0.0)) throw ValidationError("fit config: lambda must be nonnegative");
  if (config.n_starts < 1) throw ValidationError("fit config: n_starts must be at least 1");
  if (config.max_bcd_iters < 1) throw ValidationError("fit config: max_bcd_iters must be at least 1");
  if (!(config.bcd_tol > 0.0) || !(config.glasso_tol > 0.0) || !(config.lbfgs_tol > 0.0)) {
    throw ValidationError("fit config: tolerances must be positive");
  }
  if (config.lbfgs_memory < 1) throw ValidationError("fit config: lbfgs_memory must be at least 1");
}

struct FitReport {
  double final_nll = 0.0;       // penalized likelihood value at the solution
  std::vector<double> trace;    // merit value per descent cycle, entry 0 = starting point
  bool converged = false;
  int selected_start = 0;
  int cycles = 0;
  int glasso_sweeps = 0;
  int lbfgs_iterations = 0;
};

/// Penalized negative log-likelihood of one time slice:
///   n log det T + K log det R_tau + tr(T^-1 C' R^-1 C) + lambda ||T^-1||_1
/// with C = B - 1 mu'. Evaluated through Cholesky factors; the joint
/// nK x nK covariance is never formed.
inline double penalized_nll(const Vector& mu, const Matrix& t_cov, const Vector& tau,
                            const Matrix& b, const Matrix& designs, double lambda) {
  const int n = static_cast<int>(b.rows());
  const int k = static_cast<int>(b.cols());
  if (mu.size() != k) throw ValidationError("penalized_nll: mu length must match coefficient count");
  if (t_cov.rows() != k || t_cov.cols() != k) {
    throw ValidationError("penalized_nll: covariance must be modes x modes");
  }
  if (designs.rows() != n) throw ValidationError("penalized_nll: one design row per run required");
  if (!(lambda >= 0.0)) throw ValidationError("penalized_nll: lambda must be nonnegative");

  Eigen::LLT<Matrix> t_llt(t_cov);
  if (t_llt.info() != Eigen::Success) {
    throw NumericalError("penalized_nll: mode covariance is not positive definite");
  }
  double logdet_t = 0.0;
  for (int i = 0; i < k; ++i) logdet_t += 2.0 * std::log(t_llt.matrixL()(i, i));
  const Matrix t_inv = t_llt.solve(Matrix::Identity(k, k));

  const auto factor = factor_correlation(correlation_matrix(tau, designs), designs);
  double logdet_r = 0.0;
  for (int i = 0; i < n; ++i) logdet_r += 2.0 * std::log(factor.llt.matrixL()(i, i));

  const Matrix centered = b.rowwise() - mu.transpose();
  const Matrix m = centered.transpose() * factor.llt.solve(centered);
  return n * logdet_t + k * logdet_r + t_inv.cwiseProduct(m).sum() +
         lambda * t_inv.cwiseAbs().sum();
}

namespace detail {

inline Vector gls_mean(const CorrelationFactor& factor, const Matrix& b) {
  const Vector rinv_one = factor.llt.solve(Vector::Ones(b.rows()));
  const double denom = rinv_one.sum();  // 1' R^-1 1
  if (!(denom > 0.0)) throw NumericalError("profile_mu: correlation mass is not positive");
  return b.transpose() * rinv_one / denom;
}

struct TauObjective {
  double value = 0.0;
  Vector mu;
};

/// K log det R_tau + tr(Theta C' R^-1 C) with mu profiled out at the given
/// tau. Theta is the (possibly sparse) precision weighting the coefficient
/// residuals; the log det T and penalty terms are constant in tau and left
/// to the caller. The analytic gradient uses the envelope property: the
/// profiled mean is stationary, so only the explicit R dependence remains.
inline TauObjective tau_objective(const Vector& tau, const Matrix& b, const Matrix& designs,
                                  const Matrix& theta, Vector* grad = nullptr) {
  const int n = static_cast<int>(b.rows());
  const int k = static_cast<int>(b.cols());
  const int p = static_cast<int>(designs.cols());
  const Matrix r = correlation_matrix(tau, designs);
  const auto factor = factor_correlation(r, designs);

  TauObjective out;
  out.mu = gls_mean(factor, b);
  const Matrix centered = b.rowwise() - out.mu.transpose();
  const Matrix a = factor.llt.solve(centered);  // R^-1 C
  double logdet_r = 0.0;
  for (int i = 0; i < n; ++i) logdet_r += 2.0 * std::log(factor.llt.matrixL()(i, i));
  out.value = k * logdet_r + theta.cwiseProduct(centered.transpose() * a).sum();

  if (grad != nullptr) {
    const Matrix r_inv = factor.llt.solve(Matrix::Identity(n, n));
    const Matrix g = static_cast<double>(k) * r_inv - a * theta * a.transpose();
    grad->resize(p);
    for (int j = 0; j < p; ++j) {
      double gj = 0.0;
      for (int i = 0; i < n; ++i) {
        for (int l = 0; l < n; ++l) {
          const double d = designs(i, j) - designs(l, j);
          gj += g(i, l) * r(i, l) * 4.0 * d * d;
        }
      }
      (*grad)(j) = gj / tau(j);
    }
  }
  return out;
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

constexpr double kTauLo = 1e-3;
constexpr double kTauHi = 1.0 - 1e-3;

struct TauBlockResult {
  Vector tau;
  Vector mu;
  double value = 0.0;
  bool converged = false;
  int iterations = 0;
};

/// Minimizes the profiled objective over the smoothness box via a logit
/// change of variables, so the optimizer works on an unconstrained problem
/// whose iterates can never touch the boundary.
inline TauBlockResult tau_block_with_precision(const Matrix& theta, const Matrix& b,
                                               const Matrix& designs, const Vector& tau0,
                                               double lbfgs_tol, int lbfgs_memory) {
  const int p = static_cast<int>(designs.cols());
  check_tau(tau0);
  if (tau0.size() != p) throw ValidationError("tau block: tau0 dimension mismatch");

  const double width = kTauHi - kTauLo;
  Vector z0(p);
  for (int j = 0; j < p; ++j) {
    const double frac =
        std::clamp((tau0(j) - kTauLo) / width, 1e-12, 1.0 - 1e-12);
    z0(j) = std::log(frac / (1.0 - frac));
  }

  // surface factorization failures at the start with their diagnostic intact
  tau_objective(tau0, b, designs, theta);

  auto objective = [&](const Vector& z, Vector& grad) -> double {
    Vector tau(p), slope(p);
    for (int j = 0; j < p; ++j) {
      const double s = sigmoid(z(j));
      tau(j) = kTauLo + width * s;
      slope(j) = width * s * (1.0 - s);
    }
    Vector g_tau(p);
    double value = 0.0;
    try {
      value = tau_objective(tau, b, designs, theta, &g_tau).value;
    } catch (const NumericalError&) {
      grad = Vector::Zero(p);
      return std::numeric_limits<double>::infinity();
    }
    grad = g_tau.cwiseProduct(slope);
    return value;
  };

  LbfgsOptions opts;
  opts.grad_tol = lbfgs_tol;
  opts.memory = lbfgs_memory;
  opts.max_iters = 400;
  // the logit coordinates run off to +-inf at the box faces, where the
  // coordinate-scaled test would fire long before the objective levels off
  opts.scale_grad_tol = false;
  // near an interior optimum the Cholesky-based objective carries ~1e-15
  // relative noise, so a pure gradient test can sit unreachable below it
  opts.value_tol = 1e-12;
  const auto res = lbfgs_minimize(objective, z0, opts);

  TauBlockResult out;
  out.tau.resize(p);
  for (int j = 0; j < p; ++j) out.tau(j) = kTauLo + width * sigmoid(res.x(j));
  const auto at = tau_objective(out.tau, b, designs, theta);
  out.mu = at.mu;
  out.value = at.value;
  out.converged = res.converged && !res.line_search_failed;
  out.iterations = res.iterations;
  return out;
}

}  // namespace detail

/// Generalized-least-squares mean of the coefficients under the smoothness
/// kernel: mu = (1' R^-1 1)^-1 (1' R^-1 B), one value per mode.
inline Vector profile_mu(const Vector& tau, const Matrix& b, const Matrix& designs) {
  if (b.rows() != designs.rows()) throw ValidationError("profile_mu: one design row per run required");
  if (b.rows() < 1) throw ValidationError("profile_mu: at least one run required");
  return detail::gls_mean(factor_correlation(correlation_matrix(tau, designs), designs), b);
}

/// Smoothness update with the mode covariance held fixed: descends
/// tau -> K log det R_tau + tr(T^-1 C' R^-1 C) with mu profiled at each tau.
/// A failed line search returns the best iterate found, flagged non-converged.
inline detail::TauBlockResult lbfgs_tau_block(const Matrix& t_cov, const Matrix& b,
                                              const Matrix& designs, const Vector& tau0,
                                              double lbfgs_tol = 1e-8, int lbfgs_memory = 8) {
  Eigen::LLT<Matrix> t_llt(t_cov);
  if (t_llt.info() != Eigen::Success) {
    throw NumericalError("tau block: mode covariance is not positive definite");
  }
  const Matrix theta = t_llt.solve(Matrix::Identity(t_cov.rows(), t_cov.cols()));
  return detail::tau_block_with_precision(theta, b, designs, tau0, lbfgs_tol, lbfgs_memory);
}

struct SliceFit {
  GpModelSlice model;
  Matrix precision;   // sparse precision of the mode covariance, exact zeros kept
  FitReport report;
};

namespace detail {

struct StartOutcome {
  bool ok = false;
  std::string error;
  Vector mu;
  Matrix t_cov;
  Matrix precision;
  Vector tau;
  FitReport report;
};

inline StartOutcome run_bcd_start(const Matrix& b, const Matrix& designs,
                                  const BoolMatrix& forbidden, const FitConfig& config,
                                  const Vector& tau0) {
  const int n = static_cast<int>(b.rows());
  const int k = static_cast<int>(b.cols());
  StartOutcome out;
  try {
    Vector mu = Vector::Zero(k);
    Matrix t_cov = Matrix::Identity(k, k);
    Matrix theta = Matrix::Identity(k, k);
    Vector tau = tau0;

    const double n_lambda = n * config.lambda;
    auto theta_terms = [&](const Matrix& th) {
      Eigen::LLT<Matrix> llt(th);
      if (llt.info() != Eigen::Success) {
        throw NumericalError("bcd: precision iterate lost positive definiteness");
      }
      double logdet = 0.0;
      for (int i = 0; i < k; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
      return -n * logdet + n_lambda * th.cwiseAbs().sum();
    };

    // merit value at the starting point, with the fixed initial mean
    GlassoOptions glasso_opts;
    glasso_opts.tol = config.glasso_tol;

    double quad0;
    double logdet_r0;
    {
      const Matrix r = correlation_matrix(tau, designs);
      const auto factor = factor_correlation(r, designs);
      const Matrix centered = b.rowwise() - mu.transpose();
      const Matrix m = centered.transpose() * factor.llt.solve(centered);
      quad0 = theta.cwiseProduct(m).sum();
      logdet_r0 = 0.0;
      for (int i = 0; i < n; ++i) logdet_r0 += 2.0 * std::log(factor.llt.matrixL()(i, i));
    }
    double merit = theta_terms(theta) + k * logdet_r0 + quad0;
    out.report.trace.push_back(merit);

    for (int cycle = 0; cycle < config.max_bcd_iters; ++cycle) {
      // covariance block: whitened sample covariance under the current
      // kernel, solved by the penalized sparse estimator
      const Matrix r = correlation_matrix(tau, designs);
      const auto factor = factor_correlation(r, designs);
      const Matrix centered = b.rowwise() - mu.transpose();
      const Matrix raw = centered.transpose() * factor.llt.solve(centered);
      const Matrix m = 0.5 * (raw + raw.transpose());
      double logdet_r = 0.0;
      for (int i = 0; i < n; ++i) logdet_r += 2.0 * std::log(factor.llt.matrixL()(i, i));

      const auto gl = glasso(m / n, config.lambda, forbidden, glasso_opts);
      out.report.glasso_sweeps += gl.sweeps;
      // the block solver works to a KKT tolerance, so near a fixed point its
      // result can sit a hair above the incumbent; accept only descent
      const double candidate = theta_terms(gl.precision) + k * logdet_r +
                               gl.precision.cwiseProduct(m).sum();
      if (candidate <= merit) {
        theta = gl.precision;
        t_cov = gl.covariance;
        merit = candidate;
      }

      // smoothness block with the new precision; profiles the mean
      const auto tb = detail::tau_block_with_precision(theta, b, designs, tau,
                                                       config.lbfgs_tol, config.lbfgs_memory);
      out.report.lbfgs_iterations += tb.iterations;
      tau = tb.tau;
      mu = tb.mu;

      const double next = theta_terms(theta) + tb.value;
      out.report.trace.push_back(next);
      out.report.cycles = cycle + 1;
      const double change = std::fabs(next - merit);
      merit = next;
      if (change <= config.bcd_tol * std::max(1.0, std::fabs(merit))) {
        out.report.converged = true;
        break;
      }
    }

    out.mu = mu;
    out.t_cov = t_cov;
    out.precision = theta;
    out.tau = tau;
    out.ok = true;
  } catch (const NumericalError& e) {
    out.error = e.what();
  }
  return out;
}

}  // namespace detail

/// Blockwise-descent maximum likelihood for one time slice: alternates the
/// sparse covariance update and the profiled smoothness update from several
/// space-filling starting points, keeping the lowest merit value. The merit
/// traced per cycle carries the penalty the covariance block actually
/// minimizes (n times lambda, since that block sees the per-run average),
/// which is what makes the trace provably non-increasing; final_nll reports
/// the per-slice penalized likelihood with lambda as given.
inline SliceFit bcd_fit(const Matrix& b, const Matrix& designs, const ModeLayout& layout,
                        const FitConfig& config, int threads = 1) {
  validate(config);
  const int n = static_cast<int>(b.rows());
  const int k = static_cast<int>(b.cols());
  const int p = static_cast<int>(designs.cols());
  if (n < 2) throw ValidationError("bcd_fit: n >= 2 required");
  if (designs.rows() != n) throw ValidationError("bcd_fit: one design row per run required");
  if (p < 1) throw ValidationError("bcd_fit: designs need at least one column");
  if (layout.total() != k) throw ValidationError("bcd_fit: layout does not match coefficient count");
  if (!b.allFinite() || !designs.allFinite()) {
    throw ValidationError("bcd_fit: coefficients and designs must be finite");
  }

  const BoolMatrix forbidden =
      config.mask_within_variable ? within_variable_mask(layout) : no_mask(k);

  Matrix tau0(config.n_starts, p);
  tau0.row(0).setConstant(detail::kTauHi);
  if (config.n_starts > 1) {
    tau0.bottomRows(config.n_starts - 1) = scrambled_low_discrepancy(
        p, config.n_starts - 1, config.seed, detail::kTauLo, detail::kTauHi);
  }

  std::vector<detail::StartOutcome> outcomes(static_cast<size_t>(config.n_starts));
  parallel_for(config.n_starts, threads, [&](int s) {
    outcomes[static_cast<size_t>(s)] =
        detail::run_bcd_start(b, designs, forbidden, config, tau0.row(s).transpose());
  });

  int best = -1;
  for (int s = 0; s < config.n_starts; ++s) {
    if (!outcomes[static_cast<size_t>(s)].ok) continue;
    if (best < 0 ||
        outcomes[static_cast<size_t>(s)].report.trace.back() < outcomes[static_cast<size_t>(best)].report.trace.back()) {
      best = s;
    }
  }
  if (best < 0) {
    throw NumericalError("bcd_fit: every start failed; last error: " +
                         outcomes.back().error);
  }

  auto& won = outcomes[static_cast<size_t>(best)];
  SliceFit fit;
  fit.model = GpModelSlice(won.mu, won.t_cov, won.tau, designs, b);
  fit.precision = won.precision;
  fit.report = won.report;
  fit.report.selected_start = best;
  fit.report.final_nll = penalized_nll(won.mu, won.t_cov, won.tau, b, designs, config.lambda);
  return fit;
}

inline SliceFit bcd_fit(const Matrix& b, const Matrix& designs, const FitConfig& config,
                        int threads = 1) {
  return bcd_fit(b, designs, ModeLayout::independent(static_cast<int>(b.cols())), config,
                 threads);
}

/// Fits every time slice of a coefficient tensor independently; slices are
/// mutually independent, so they run in parallel with starts kept serial.
inline std::vector<SliceFit> fit_ensemble(const CoefficientTensor& coeffs, const Matrix& designs,
                                          const ModeLayout& layout, const FitConfig& config,
                                          int threads = 1) {
  const int steps = coeffs.steps();
  if (steps < 1) throw ValidationError("fit_ensemble: no time slices");
  std::vector<SliceFit> fits(static_cast<size_t>(steps));
  parallel_for(steps, threads, [&](int t) {
    fits[static_cast<size_t>(t)] = bcd_fit(coeffs.slices[static_cast<size_t>(t)], designs,
                                           layout, config, 1);
  });
  return fits;
}

struct CvTuneResult {
  double lambda = 0.0;
  int selected_index = 0;
  std::vector<double> grid;
  std::vector<double> mean_errors;
  std::vector<double> std_errors;
  Matrix fold_errors;  // grid x folds held-out SSE
};

struct TopKTuneResult {
  double lambda = 0.0;
  int edges = 0;
};

namespace detail {

inline double offmask_magnitude(const Matrix& b, const BoolMatrix& forbidden) {
  const int n = static_cast<int>(b.rows());
  const Matrix centered = b.rowwise() - b.colwise().mean();
  const Matrix s = centered.transpose() * centered / n;
  double largest = 0.0;
  for (int i = 0; i < s.rows(); ++i) {
    for (int j = i + 1; j < s.cols(); ++j) {
      if (!forbidden(i, j)) largest = std::max(largest, std::fabs(s(i, j)));
    }
  }
  return largest;
}

}  // namespace detail

/// Cross-validated penalty selection on a logarithmic grid. Folds are formed
/// over whole runs (round-robin on run index), the held-out error is the SSE
/// of the interpolator mean against the held-out coefficients, and the
/// selected penalty is the largest one whose mean error stays within one
/// standard error of the minimum.
inline CvTuneResult tune_lambda_cv(const Matrix& b, const Matrix& designs,
                                   const ModeLayout& layout, int folds, FitConfig config,
                                   int grid_size = 10) {
  const int n = static_cast<int>(b.rows());
  if (folds < 2 || folds > n) throw ValidationError("tune_lambda: folds must lie in [2, n]");
  if (grid_size < 2) throw ValidationError("tune_lambda: grid needs at least two points");
  if (n - (n + folds - 1) / folds < 2) {
    throw ValidationError("tune_lambda: folds leave fewer than two training runs");
  }

  const BoolMatrix forbidden = config.mask_within_variable
                                   ? within_variable_mask(layout)
                                   : no_mask(static_cast<int>(b.cols()));
  const double lam_max = std::max(detail::offmask_magnitude(b, forbidden), 1e-8);

  CvTuneResult out;
  out.grid.resize(static_cast<size_t>(grid_size));
  for (int g = 0; g < grid_size; ++g) {
    const double frac = static_cast<double>(g) / (grid_size - 1);
    out.grid[static_cast<size_t>(g)] = lam_max * std::pow(1e-3, 1.0 - frac);
  }

  out.fold_errors = Matrix::Zero(grid_size, folds);
  for (int g = 0; g < grid_size; ++g) {
    config.lambda = out.grid[static_cast<size_t>(g)];
    for (int f = 0; f < folds; ++f) {
      std::vector<int> train, held;
      for (int i = 0; i < n; ++i) ((i % folds == f) ? held : train).push_back(i);
      Matrix b_train(static_cast<int>(train.size()), b.cols());
      Matrix d_train(static_cast<int>(train.size()), designs.cols());
      for (size_t i = 0; i < train.size(); ++i) {
        b_train.row(static_cast<int>(i)) = b.row(train[i]);
        d_train.row(static_cast<int>(i)) = designs.row(train[i]);
      }
      const auto fit = bcd_fit(b_train, d_train, layout, config);
      double sse = 0.0;
      for (int i : held) {
        const auto pred = fit.model.predict(designs.row(i).transpose());
        sse += (pred.mean - b.row(i).transpose()).squaredNorm();
      }
      out.fold_errors(g, f) = sse;
    }
  }

  out.mean_errors.resize(static_cast<size_t>(grid_size));
  out.std_errors.resize(static_cast<size_t>(grid_size));
  for (int g = 0; g < grid_size; ++g) {
    const double mean = out.fold_errors.row(g).mean();
    double var = 0.0;
    for (int f = 0; f < folds; ++f) var += std::pow(out.fold_errors(g, f) - mean, 2);
    var /= std::max(1, folds - 1);
    out.mean_errors[static_cast<size_t>(g)] = mean;
    out.std_errors[static_cast<size_t>(g)] = std::sqrt(var / folds);
  }

  int arg_min = 0;
  for (int g = 1; g < grid_size; ++g) {
    if (out.mean_errors[static_cast<size_t>(g)] < out.mean_errors[static_cast<size_t>(arg_min)]) arg_min = g;
  }
  const double ceiling =
      out.mean_errors[static_cast<size_t>(arg_min)] + out.std_errors[static_cast<size_t>(arg_min)];
  out.selected_index = arg_min;
  for (int g = grid_size - 1; g >= 0; --g) {
    if (out.mean_errors[static_cast<size_t>(g)] <= ceiling) {
      out.selected_index = g;
      break;
    }
  }
  out.lambda = out.grid[static_cast<size_t>(out.selected_index)];
  return out;
}

/// Penalty selection by edge count: bisects for the largest penalty whose
/// fitted precision keeps exactly k unmasked edges. k = 0 asks for the
/// saturation threshold, the smallest penalty that empties the graph. When
/// the exact count is unachievable the nearest achieved count is reported.
inline TopKTuneResult tune_lambda_top_k(const Matrix& b, const Matrix& designs,
                                        const ModeLayout& layout, int k, FitConfig config) {
  const int modes = static_cast<int>(b.cols());
  const BoolMatrix forbidden =
      config.mask_within_variable ? within_variable_mask(layout) : no_mask(modes);
  int allowed = 0;
  for (int i = 0; i < modes; ++i) {
    for (int j = i + 1; j < modes; ++j) {
      if (!forbidden(i, j)) ++allowed;
    }
  }
  if (k < 0) throw ValidationError("tune_lambda: edge count must be nonnegative");
  if (k > allowed) {
    throw ValidationError("tune_lambda: requested " + std::to_string(k) + " edges but only " +
                          std::to_string(allowed) + " are allowed by the mask");
  }

  auto edges_at = [&](double lambda) {
    config.lambda = lambda;
    const auto fit = bcd_fit(b, designs, layout, config);
    return count_offmask_edges(fit.precision, forbidden);
  };

  const double seed_lam = std::max(detail::offmask_magnitude(b, forbidden), 1e-12);

  if (k == 0) {
    double lo = seed_lam * 1e-4;
    double hi = seed_lam;
    for (int i = 0; i < 60 && edges_at(hi) > 0; ++i) hi *= 2.0;
    if (edges_at(lo) == 0) {
      for (int i = 0; i < 8 && edges_at(lo) == 0; ++i) lo *= 0.1;
      if (edges_at(lo) == 0) return {lo, 0};  // empty at every tested penalty
    }
    for (int i = 0; i < 50 && (hi - lo) > 1e-8 * hi; ++i) {
      const double mid = 0.5 * (lo + hi);
      (edges_at(mid) == 0 ? hi : lo) = mid;
    }
    return {hi, 0};
  }

  TopKTuneResult nearest{seed_lam, -1};
  auto consider = [&](double lambda, int count) {
    if (nearest.edges < 0 || std::abs(count - k) < std::abs(nearest.edges - k) ||
        (std::abs(count - k) == std::abs(nearest.edges - k) && count == k &&
         lambda > nearest.lambda)) {
      nearest = {lambda, count};
    }
  };

  double lo = seed_lam * 1e-4;
  int lo_edges = edges_at(lo);
  consider(lo, lo_edges);
  for (int i = 0; i < 12 && lo_edges < k; ++i) {
    lo *= 0.2;
    lo_edges = edges_at(lo);
    consider(lo, lo_edges);
  }
  double hi = std::max(seed_lam, lo * 10.0);
  int hi_edges = edges_at(hi);
  consider(hi, hi_edges);
  for (int i = 0; i < 60 && hi_edges >= k; ++i) {
    hi *= 2.0;
    hi_edges = edges_at(hi);
    consider(hi, hi_edges);
  }
  if (lo_edges < k) return nearest;  // even the weakest penalty keeps too few edges

  for (int i = 0; i < 50 && (hi - lo) > 1e-8 * hi; ++i) {
    const double mid = 0.5 * (lo + hi);
    const int count = edges_at(mid);
    consider(mid, count);
    if (count >= k) {
      lo = mid;
      lo_edges = count;
    } else {
      hi = mid;
    }
  }
  if (lo_edges == k) return {lo, k};
  return nearest;
}

}  // namespace flowemu
