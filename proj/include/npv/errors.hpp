#pragma once

#include <stdexcept>
#include <string>

namespace npv {

/// Root of the library's exception hierarchy.
///
/// Two families exist: validation errors (bad shapes, bad arguments, bad
/// files) and numerical errors (singular covariances, overflow, failure to
/// converge). The CLI maps them to exit codes 2 and 3 respectively.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DomainError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class FormatError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// A covariance (or other SPD operand) has an eigenvalue at or below the
// configured floor, i.e. the point sits too close to the boundary of the
// manifold for its logarithm to be trusted.
class SingularityError : public NumericalError {
 public:
  SingularityError(const std::string& what, double eigenvalue)
      : NumericalError(what), eigenvalue_(eigenvalue) {}
  double eigenvalue() const noexcept { return eigenvalue_; }

 private:
  double eigenvalue_;
};

class ConvergenceError : public NumericalError {
 public:
  ConvergenceError(const std::string& what, double residual)
      : NumericalError(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

class SimulationError : public NumericalError {
 public:
  SimulationError(const std::string& what, long path, long time)
      : NumericalError(what), path_(path), time_(time) {}
  long path() const noexcept { return path_; }
  long time() const noexcept { return time_; }

 private:
  long path_;
  long time_;
};

class OptimizerError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class TrainingError : public NumericalError {
 public:
  TrainingError(const std::string& what, long epoch, long batch)
      : NumericalError(what), epoch_(epoch), batch_(batch) {}
  long epoch() const noexcept { return epoch_; }
  long batch() const noexcept { return batch_; }

 private:
  long epoch_;
  long batch_;
};

}  // namespace npv
