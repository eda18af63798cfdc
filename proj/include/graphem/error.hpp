#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace graphem {

/// Input that fails a structural or domain check (bad shape, bad value,
/// unparseable file). Maps to CLI exit code 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file content.
class ParseError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// A call-site argument outside the operation's domain.
class ArgumentError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Numerical breakdown: a matrix that should be positive definite is not,
/// even after the jitter budget is spent. Maps to CLI exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An iterative solver ran out of iterations. Carries the objective trace and
/// the last iterate so callers can inspect how far it got.
class ConvergenceError : public NumericalError {
 public:
  ConvergenceError(const std::string& what, std::vector<double> trace,
                   Eigen::MatrixXd last_iterate = {})
      : NumericalError(what), trace_(std::move(trace)), last_(std::move(last_iterate)) {}

  const std::vector<double>& trace() const noexcept { return trace_; }
  const Eigen::MatrixXd& last_iterate() const noexcept { return last_; }

 private:
  std::vector<double> trace_;
  Eigen::MatrixXd last_;
};

}  // namespace graphem
