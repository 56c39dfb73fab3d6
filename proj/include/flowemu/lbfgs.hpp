#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <utility>

#include "flowemu/common.hpp"

namespace flowemu {

struct LbfgsOptions {
  int memory = 10;
  int max_iters = 500;
  double grad_tol = 1e-10;  // convergence: max |g_i| <= grad_tol * max(1, |x|_inf)
  double armijo_c1 = 1e-4;
  int max_halvings = 60;
  // measure the gradient test in absolute terms; use for problems whose
  // coordinates grow large while the objective still changes (e.g. logit
  // reparameterizations flattening toward a bound)
  bool scale_grad_tol = true;
  // stop once an accepted step lowers the value by no more than
  // value_tol * max(1, |value|); 0 disables. For objectives whose gradient
  // target sits below the evaluation's own rounding noise this is the only
  // test that can ever fire.
  double value_tol = 0.0;
};

struct LbfgsResult {
  Vector x;
  double value = 0.0;
  Vector gradient;
  int iterations = 0;
  bool converged = false;
  bool line_search_failed = false;
};

/// Limited-memory BFGS with two-loop recursion and Armijo backtracking.
/// The objective callback fills the gradient and returns the value. On a
/// failed line search the best iterate seen so far is returned with the
/// failure flagged rather than thrown: callers treat it as a usable but
/// non-converged optimum.
template <typename Objective>
LbfgsResult lbfgs_minimize(Objective&& fn, Vector x0, const LbfgsOptions& opts = {}) {
  if (opts.memory < 1) throw ValidationError("lbfgs: memory must be at least 1");
  if (opts.max_iters < 1) throw ValidationError("lbfgs: max_iters must be at least 1");
  if (opts.value_tol < 0.0) throw ValidationError("lbfgs: value_tol must be nonnegative");
  const int dim = static_cast<int>(x0.size());
  if (dim < 1) throw ValidationError("lbfgs: empty starting point");

  LbfgsResult best;
  best.x = x0;
  best.gradient.resize(dim);
  best.value = fn(best.x, best.gradient);
  if (!std::isfinite(best.value)) {
    throw ValidationError("lbfgs: objective is not finite at the starting point");
  }

  Vector x = best.x;
  Vector grad = best.gradient;
  double value = best.value;

  std::deque<std::pair<Vector, Vector>> pairs;  // (s, y) history, newest last
  LbfgsResult out;

  auto grad_small = [&](const Vector& g, const Vector& at) {
    const double scale = opts.scale_grad_tol ? std::max(1.0, at.cwiseAbs().maxCoeff()) : 1.0;
    return g.cwiseAbs().maxCoeff() <= opts.grad_tol * scale;
  };

  for (int iter = 0; iter < opts.max_iters; ++iter) {
    if (grad_small(grad, x)) {
      out.converged = true;
      break;
    }

    // two-loop recursion for the search direction
    Vector q = grad;
    std::vector<double> alpha(pairs.size());
    for (int i = static_cast<int>(pairs.size()) - 1; i >= 0; --i) {
      const auto& [s, y] = pairs[static_cast<size_t>(i)];
      const double rho = 1.0 / y.dot(s);
      alpha[static_cast<size_t>(i)] = rho * s.dot(q);
      q -= alpha[static_cast<size_t>(i)] * y;
    }
    if (!pairs.empty()) {
      const auto& [s, y] = pairs.back();
      q *= s.dot(y) / y.dot(y);
    }
    for (size_t i = 0; i < pairs.size(); ++i) {
      const auto& [s, y] = pairs[i];
      const double rho = 1.0 / y.dot(s);
      const double beta = rho * y.dot(q);
      q += (alpha[i] - beta) * s;
    }
    Vector direction = -q;
    if (pairs.empty()) {
      // no curvature information yet: a raw gradient step of length |g| can
      // jump across basins, so cap the very first trial step at unit length
      direction = -grad / std::max(1.0, grad.norm());
    }
    double slope = grad.dot(direction);
    if (!(slope < 0.0)) {  // curvature info went bad; fall back to steepest descent
      direction = -grad / std::max(1.0, grad.norm());
      slope = grad.dot(direction);
      pairs.clear();
    }

    double step = 1.0;
    double trial_value = std::numeric_limits<double>::infinity();
    Vector trial_x(dim), trial_grad(dim);
    bool accepted = false;
    for (int h = 0; h <= opts.max_halvings; ++h) {
      trial_x = x + step * direction;
      trial_value = fn(trial_x, trial_grad);
      if (std::isfinite(trial_value) && trial_value <= value + opts.armijo_c1 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      out.line_search_failed = true;
      break;
    }

    const Vector s = trial_x - x;
    const Vector y = trial_grad - grad;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      pairs.emplace_back(s, y);
      if (static_cast<int>(pairs.size()) > opts.memory) pairs.pop_front();
    }

    const double drop = value - trial_value;
    x = trial_x;
    grad = trial_grad;
    value = trial_value;
    out.iterations = iter + 1;
    if (value < best.value) {
      best.x = x;
      best.value = value;
      best.gradient = grad;
    }
    if (opts.value_tol > 0.0 && drop <= opts.value_tol * std::max(1.0, std::fabs(value))) {
      out.converged = true;
      break;
    }
  }

  if (value < best.value) {
    best.x = x;
    best.value = value;
    best.gradient = grad;
  }
  if (!out.converged && grad_small(best.gradient, best.x)) out.converged = true;
  out.x = best.x;
  out.value = best.value;
  out.gradient = best.gradient;
  return out;
}

}  // namespace flowemu
