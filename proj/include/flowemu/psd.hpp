#pragma once

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <vector>

#include "flowemu/common.hpp"

namespace flowemu {

struct PsdResult {
  Vector frequencies;  // 0 .. Nyquist, spacing 1/(T*dt)
  Vector power;        // one-sided density; sum(power) * df = series variance
};

struct PsdOptions {
  bool hann_window = false;
};

namespace detail {

// FFTW's planner mutates global state; executing a finished plan is safe.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

inline std::vector<std::complex<double>> real_dft(const Vector& x) {
  const int n = static_cast<int>(x.size());
  std::vector<double> in(x.data(), x.data() + n);
  std::vector<std::complex<double>> out(n / 2 + 1);
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    plan = fftw_plan_dft_r2c_1d(n, in.data(), reinterpret_cast<fftw_complex*>(out.data()),
                                FFTW_ESTIMATE);
  }
  if (plan == nullptr) throw NumericalError("psd: fftw failed to build a transform plan");
  fftw_execute(plan);
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  return out;
}

}  // namespace detail

/// One-sided periodogram of the mean-removed series. Interior bins carry the
/// doubled two-sided density, so sum(power) * df reproduces the population
/// variance of the series; a constant series yields an all-zero spectrum.
/// The Hann option trades that exact energy split for reduced leakage,
/// normalizing by the window's mean square.
inline PsdResult psd_probe(const Vector& series, double dt, const PsdOptions& options = {}) {
  const int t_count = static_cast<int>(series.size());
  if (t_count < 8) throw ValidationError("psd: need at least 8 samples");
  if (!(dt > 0.0) || !std::isfinite(dt)) throw ValidationError("psd: time step must be positive");
  if (!series.allFinite()) throw ValidationError("psd: series must be finite");

  Vector x = series.array() - series.mean();
  double norm = static_cast<double>(t_count);  // sum of squared window weights
  if (options.hann_window) {
    norm = 0.0;
    for (int t = 0; t < t_count; ++t) {
      const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * t / t_count);
      x(t) *= w;
      norm += w * w;
    }
  }

  const auto spectrum = detail::real_dft(x);
  const int bins = t_count / 2 + 1;
  PsdResult out;
  out.frequencies.resize(bins);
  out.power.resize(bins);
  for (int k = 0; k < bins; ++k) {
    out.frequencies(k) = k / (t_count * dt);
    const bool interior = k > 0 && !(t_count % 2 == 0 && k == bins - 1);
    out.power(k) = (interior ? 2.0 : 1.0) * dt * std::norm(spectrum[k]) / norm;
  }
  return out;
}

}  // namespace flowemu
