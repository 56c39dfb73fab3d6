#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace flowemu {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Bad or inconsistent input: invalid geometry, malformed bundle, parameter
/// out of its documented domain.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A numerical procedure failed: factorization breakdown, iteration did not
/// converge within its budget.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Pipeline stages were run out of order or against modified upstream output.
class StageOrderError : public std::runtime_error {
 public:
  explicit StageOrderError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace flowemu
