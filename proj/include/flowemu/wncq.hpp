#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>

#include "flowemu/common.hpp"
#include "flowemu/stats.hpp"

namespace flowemu {

/// Law of  offset + sum_j weights_j * chi^2_1(noncentralities_j),  the
/// noncentralities being the squared means of the underlying normals. An
/// empty weight vector is the degenerate point mass at the offset.
struct WncqDistribution {
  Vector weights;
  Vector noncentralities;  // mu_j^2
  double offset = 0.0;

  int terms() const { return static_cast<int>(weights.size()); }
};

inline void validate(const WncqDistribution& dist) {
  if (dist.weights.size() != dist.noncentralities.size()) {
    throw ValidationError("wncq: weights and noncentralities must pair up");
  }
  if (!std::isfinite(dist.offset)) throw ValidationError("wncq: offset must be finite");
  for (int j = 0; j < dist.terms(); ++j) {
    if (!(dist.weights(j) > 0.0) || !std::isfinite(dist.weights(j))) {
      throw ValidationError("wncq: weights must be positive and finite");
    }
    if (!(dist.noncentralities(j) >= 0.0) || !std::isfinite(dist.noncentralities(j))) {
      throw ValidationError("wncq: noncentralities must be nonnegative and finite");
    }
  }
}

inline double wncq_mean(const WncqDistribution& dist) {
  validate(dist);
  return dist.offset +
         (dist.weights.array() * (1.0 + dist.noncentralities.array())).sum();
}

inline double wncq_variance(const WncqDistribution& dist) {
  validate(dist);
  return 2.0 * (dist.weights.array().square() * (1.0 + 2.0 * dist.noncentralities.array())).sum();
}

struct WncqOptions {
  double abs_tol = 1e-6;
  // Liu-style moment matching instead of the exact inversion; much faster,
  // roughly percent-level accurate in the tails
  bool moment_matching = false;
};

namespace detail {

struct ImhofTerms {
  const Vector& w;
  const Vector& nc;
  double s;  // quantile, already shifted by the offset

  // integrand = sin(theta(u)) / (u * rho(u))
  double theta(double u) const {
    double acc = 0.0;
    for (int j = 0; j < w.size(); ++j) {
      const double wu = w(j) * u;
      acc += std::atan(wu) + nc(j) * wu / (1.0 + wu * wu);
    }
    return 0.5 * (acc - s * u);
  }
  double log_rho(double u) const {
    double acc = 0.0;
    for (int j = 0; j < w.size(); ++j) {
      const double wu2 = w(j) * u * (w(j) * u);
      acc += 0.25 * std::log1p(wu2) + 0.5 * nc(j) * wu2 / (1.0 + wu2);
    }
    return acc;
  }
  double theta_slope(double u) const {
    double acc = 0.0;
    for (int j = 0; j < w.size(); ++j) {
      const double wu2 = w(j) * u * (w(j) * u);
      const double denom = 1.0 + wu2;
      acc += w(j) / denom + nc(j) * w(j) * (1.0 - wu2) / (denom * denom);
    }
    return 0.5 * (acc - s);
  }
  double integrand(double u) const {
    if (u <= 0.0) return theta_slope(0.0);  // limit value
    return std::sin(theta(u)) / (u * std::exp(log_rho(u)));
  }
};

/// Composite Simpson with interval doubling; returns the Richardson-improved
/// value and writes the step-doubling discrepancy as the error estimate.
template <typename Fn>
double simpson_doubling(Fn&& fn, double a, double b, double tol, int min_points,
                        double* err_out) {
  int n = std::max(8, min_points);
  n += n % 2;  // composite Simpson needs an even panel count
  auto pass = [&](int panels) {
    const double h = (b - a) / panels;
    double acc = fn(a) + fn(b);
    for (int i = 1; i < panels; ++i) acc += fn(a + i * h) * (i % 2 == 1 ? 4.0 : 2.0);
    return acc * h / 3.0;
  };
  double coarse = pass(n);
  for (int round = 0; round < 16; ++round) {
    n *= 2;
    const double fine = pass(n);
    const double err = std::fabs(fine - coarse) / 15.0;
    if (err <= tol || round == 15) {
      if (err_out != nullptr) *err_out = err;
      return fine + (fine - coarse) / 15.0;
    }
    coarse = fine;
  }
  return coarse;  // unreachable
}

/// Exact inversion of the characteristic function: the half-line integral is
/// split into a smooth head and, past the point where the phase decreases
/// steadily, half-period lobes that form an alternating series. The lobe sum
/// is truncated with an averaged-tail correction whose error bound is half
/// the difference of the last two lobes.
inline double imhof_cdf(const Vector& w, const Vector& nc, double s, double abs_tol) {
  const ImhofTerms f{w, nc, s};
  const double budget = std::numbers::pi * abs_tol;  // error in integral units

  // past u_mono the phase slope stays below -s/4, and every 1/w_j scale is
  // behind us, so lobe magnitudes decrease monotonically
  double u_mono = 2.0 / w.minCoeff();
  for (int round = 0; round < 400; ++round) {
    if (f.theta_slope(u_mono) <= -0.25 * s) break;
    u_mono *= 2.0;
    if (round == 399) {
      throw NumericalError("wncq: phase never turned monotone; achieved error bound 0.5");
    }
  }

  double achieved = 0.0;
  double head_err = 0.0;
  const int head_points = static_cast<int>(
      std::min(16384.0, std::max(64.0, u_mono * std::fabs(f.theta_slope(0.0)))));
  double integral = simpson_doubling([&](double u) { return f.integrand(u); }, 0.0, u_mono,
                                     0.25 * budget, head_points, &head_err);
  achieved += head_err;

  // walk lobes between consecutive phase multiples of pi
  double u = u_mono;
  double theta_u = f.theta(u);
  double prev_lobe = std::numeric_limits<double>::quiet_NaN();
  bool converged = false;
  for (int lobe = 0; lobe < 200000 && !converged; ++lobe) {
    // next multiple of pi strictly below theta_u (theta is decreasing here)
    double target = std::numbers::pi * std::floor(theta_u / std::numbers::pi);
    if (theta_u - target < 1e-9) target -= std::numbers::pi;
    // bracket the crossing; theta decreases at least at rate s/4
    double lo = u, hi = u + (theta_u - target) / (0.25 * s);
    while (f.theta(hi) > target) hi += (hi - u);
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (f.theta(mid) > target) {
        lo = mid;
      } else {
        hi = mid;
      }
      if (hi - lo <= 1e-14 * hi) break;
    }
    const double u_next = 0.5 * (lo + hi);

    // per-lobe tolerances form a convergent series, so the accumulated bound
    // stays under a quarter of the budget however many lobes it takes
    const double lobe_tol =
        0.25 * budget * (6.0 / (std::numbers::pi * std::numbers::pi)) /
        ((lobe + 1.0) * (lobe + 1.0));
    double lobe_err = 0.0;
    const double lobe_val =
        simpson_doubling([&](double v) { return f.integrand(v); }, u, u_next,
                         std::max(lobe_tol, 1e-15), 8, &lobe_err);
    achieved += lobe_err;

    if (std::isfinite(prev_lobe) && std::fabs(lobe_val) <= std::fabs(prev_lobe)) {
      if (lobe_val * prev_lobe < 0.0) {
        // alternating with shrinking magnitude: the remaining sum lies within
        // half the newest lobe of prev_lobe + lobe_val / 2
        const double tail_err = 0.5 * std::fabs(lobe_val);
        if (tail_err + achieved <= budget) {
          integral += prev_lobe + 0.5 * lobe_val;  // prev_lobe was held back, see below
          achieved += tail_err;
          converged = true;
          break;
        }
      } else if (std::fabs(lobe_val) + achieved <= budget) {
        // lobes alternate by construction (each spans one pi interval of the
        // phase), so when the values underflow too far for the float sign to
        // show it, the first-omitted-term bound still holds
        integral += prev_lobe + lobe_val;
        achieved += std::fabs(lobe_val);
        converged = true;
        break;
      }
    }
    // hold the newest lobe back so the tail correction can replace half of it
    if (std::isfinite(prev_lobe)) integral += prev_lobe;
    prev_lobe = lobe_val;
    u = u_next;
    theta_u = f.theta(u);  // re-evaluate to avoid drift
  }
  if (!converged) {
    throw NumericalError("wncq: quadrature failed to converge; achieved error bound " +
                         std::to_string(achieved / std::numbers::pi));
  }

  const double cdf = 0.5 - integral / std::numbers::pi;
  return std::clamp(cdf, 0.0, 1.0);
}

/// Liu-Tang-Zhang approximation: standardize the sum and evaluate a single
/// noncentral chi^2 whose skewness (and kurtosis, when attainable) matches.
/// Exact whenever all weights coincide.
inline double liu_cdf(const Vector& w, const Vector& nc, double s) {
  auto moment = [&](int k) {
    double acc = 0.0;
    for (int j = 0; j < w.size(); ++j) acc += std::pow(w(j), k) * (1.0 + k * nc(j));
    return acc;
  };
  const double c1 = moment(1), c2 = moment(2), c3 = moment(3), c4 = moment(4);
  const double s1 = c3 / std::pow(c2, 1.5);
  const double s2 = c4 / (c2 * c2);

  double dof, delta;
  if (s1 * s1 > s2) {
    const double a = 1.0 / (s1 - std::sqrt(s1 * s1 - s2));
    delta = std::max(0.0, s1 * a * a * a - a * a);
    dof = a * a - 2.0 * delta;
  } else {
    dof = c2 * c2 * c2 / (c3 * c3);
    delta = 0.0;
  }
  dof = std::max(dof, 1e-8);
  const double t_star = (s - c1) / std::sqrt(2.0 * c2);
  const double x = t_star * std::sqrt(2.0 * (dof + 2.0 * delta)) + dof + delta;
  if (x <= 0.0) return 0.0;
  return noncentral_chi_squared_cdf(dof, delta, x);
}

}  // namespace detail

/// P(X <= q) for the weighted noncentral chi-squared sum. Single-term sums
/// use the noncentral chi-squared series directly; larger ones invert the
/// characteristic function to abs_tol unless moment matching is requested.
inline double wncq_cdf(const WncqDistribution& dist, double q, const WncqOptions& options = {}) {
  validate(dist);
  if (!std::isfinite(q)) throw ValidationError("wncq_cdf: quantile must be finite");
  if (!(options.abs_tol > 0.0)) throw ValidationError("wncq_cdf: abs_tol must be positive");

  if (dist.terms() == 0) return q >= dist.offset ? 1.0 : 0.0;
  const double s = q - dist.offset;
  if (s <= 0.0) return 0.0;
  if (dist.terms() == 1) {
    return noncentral_chi_squared_cdf(1.0, dist.noncentralities(0), s / dist.weights(0));
  }
  if (options.moment_matching) return detail::liu_cdf(dist.weights, dist.noncentralities, s);

  // cheap cutoffs keep the quadrature away from the extreme tails, where its
  // phase bookkeeping degenerates: each term alone bounds the sum below, and
  // a union bound caps the upper tail
  double lower_bound_prob = 1.0;
  for (int j = 0; j < dist.terms(); ++j) {
    lower_bound_prob = std::min(
        lower_bound_prob,
        noncentral_chi_squared_cdf(1.0, dist.noncentralities(j), s / dist.weights(j)));
    if (lower_bound_prob < 0.1 * options.abs_tol) return 0.0;
  }
  double upper_tail = 0.0;
  for (int j = 0; j < dist.terms(); ++j) {
    upper_tail += 1.0 - noncentral_chi_squared_cdf(1.0, dist.noncentralities(j),
                                                   s / (dist.terms() * dist.weights(j)));
  }
  if (upper_tail < 0.1 * options.abs_tol) return 1.0;

  return detail::imhof_cdf(dist.weights, dist.noncentralities, s, options.abs_tol);
}

/// Smallest q with P(X <= q) within 1e-6 of p, by bisection. The degenerate
/// distribution returns its point mass for every level.
inline double wncq_quantile(const WncqDistribution& dist, double p, const WncqOptions& options = {}) {
  validate(dist);
  if (!(p > 0.0) || !(p < 1.0)) {
    throw ValidationError("wncq_quantile: level must lie strictly inside (0,1)");
  }
  if (dist.terms() == 0) return dist.offset;

  const double spread = std::sqrt(wncq_variance(dist));
  double lo = dist.offset;
  double hi = wncq_mean(dist) + 8.0 * spread;
  for (int round = 0; round < 200; ++round) {
    if (wncq_cdf(dist, hi, options) >= p) break;
    hi = dist.offset + 2.0 * (hi - dist.offset);
    if (round == 199) throw NumericalError("wncq_quantile: failed to bracket the level");
  }
  double mid = 0.5 * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    mid = 0.5 * (lo + hi);
    const double c = wncq_cdf(dist, mid, options);
    if (std::fabs(c - p) <= 1e-6) return mid;
    if (c < p) {
      lo = mid;
    } else {
      hi = mid;
    }
    if (hi - lo <= 1e-13 * std::max(1.0, std::fabs(hi))) break;
  }
  if (std::fabs(wncq_cdf(dist, mid, options) - p) > 1e-6) {
    throw NumericalError("wncq_quantile: bisection stalled before reaching the level");
  }
  return mid;
}

}  // namespace flowemu
