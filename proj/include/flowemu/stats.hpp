#pragma once

#include <cmath>
#include <limits>
#include <string>

#include "flowemu/common.hpp"

namespace flowemu {

/// Regularized lower incomplete gamma P(a, x). Series expansion for
/// x < a + 1, Lentz continued fraction for the complement otherwise.
inline double regularized_gamma_p(double a, double x) {
  if (!(a > 0.0) || !(x >= 0.0) || !std::isfinite(x)) {
    throw ValidationError("regularized_gamma_p: need a > 0 and finite x >= 0");
  }
  if (x == 0.0) return 0.0;
  const double log_prefactor = -x + a * std::log(x) - std::lgamma(a);

  if (x < a + 1.0) {
    double term = 1.0 / a;
    double sum = term;
    for (int n = 1; n < 10000; ++n) {
      term *= x / (a + n);
      sum += term;
      if (std::fabs(term) < std::fabs(sum) * 1e-17) break;
    }
    return std::min(1.0, sum * std::exp(log_prefactor));
  }

  // complement via continued fraction
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -static_cast<double>(i) * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1.0) < 1e-17) break;
  }
  const double q = std::exp(log_prefactor) * h;
  return std::max(0.0, 1.0 - q);
}

inline double chi_squared_cdf(double dof, double x) {
  if (!(dof > 0.0)) throw ValidationError("chi_squared_cdf: dof must be positive");
  if (x <= 0.0) return 0.0;
  return regularized_gamma_p(0.5 * dof, 0.5 * x);
}

/// Chi-squared quantile by bisection on the regularized incomplete gamma;
/// the returned x satisfies |CDF(x) - p| <= 1e-10.
inline double chi_squared_quantile(double dof, double p) {
  if (!(p > 0.0) || !(p < 1.0)) throw ValidationError("chi_squared_quantile: p must lie in (0, 1)");
  double hi = std::max(1.0, dof);
  int guard = 0;
  while (chi_squared_cdf(dof, hi) < p) {
    hi *= 2.0;
    if (++guard > 400) throw NumericalError("chi_squared_quantile: bracket expansion failed");
  }
  double lo = 0.0;
  double mid = 0.5 * hi;
  for (int i = 0; i < 2000; ++i) {
    mid = 0.5 * (lo + hi);
    const double c = chi_squared_cdf(dof, mid);
    if (std::fabs(c - p) <= 1e-12) return mid;
    (c < p ? lo : hi) = mid;
    if (hi - lo <= std::numeric_limits<double>::epsilon() * std::max(1.0, hi)) break;
  }
  if (std::fabs(chi_squared_cdf(dof, mid) - p) > 1e-10) {
    throw NumericalError("chi_squared_quantile: bisection stalled at p-error > 1e-10");
  }
  return mid;
}

/// Noncentral chi-squared CDF as a Poisson mixture of central terms.
/// noncentrality is the sum of squared means (often written delta^2).
inline double noncentral_chi_squared_cdf(double dof, double noncentrality, double x) {
  if (!(dof > 0.0) || !(noncentrality >= 0.0)) {
    throw ValidationError("noncentral_chi_squared_cdf: need dof > 0 and noncentrality >= 0");
  }
  if (x <= 0.0) return 0.0;
  if (noncentrality == 0.0) return chi_squared_cdf(dof, x);
  // Poisson mixture of central terms, summed outward from the mode so the
  // weights stay representable however large the noncentrality gets
  const double half = 0.5 * noncentrality;
  const double k0 = std::floor(half);
  const double log_w0 = -half + (k0 > 0.0 ? k0 * std::log(half) : 0.0) - std::lgamma(k0 + 1.0);
  const double w0 = std::exp(log_w0);
  double cdf = w0 * regularized_gamma_p(0.5 * dof + k0, 0.5 * x);
  double w = w0;
  for (double j = k0 + 1.0; j < k0 + 1e6; j += 1.0) {
    w *= half / j;
    if (!(w > 1e-18 * w0) && j > half) break;
    cdf += w * regularized_gamma_p(0.5 * dof + j, 0.5 * x);
  }
  w = w0;
  for (double j = k0; j > 0.0; j -= 1.0) {
    w *= j / half;
    if (!(w > 1e-18 * w0)) break;
    cdf += w * regularized_gamma_p(0.5 * dof + (j - 1.0), 0.5 * x);
  }
  return std::min(1.0, cdf);
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace flowemu
