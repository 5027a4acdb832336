#pragma once

#include <stdexcept>
#include <string>

namespace oslsel {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input: shapes, labels, ranges, malformed files. Maps to CLI exit code 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// A numerical procedure could not produce a valid answer. Maps to CLI exit code 3.
class SolverError : public Error {
 public:
  using Error::Error;
};

/// Parameter values for which the model is undefined (zero mixture denominator,
/// nonpositive test density term).
class DegenerateParameterError : public SolverError {
 public:
  using SolverError::SolverError;
};

/// The multiplier system has no root with every denominator positive.
class InfeasibleLambdaError : public SolverError {
 public:
  InfeasibleLambdaError(const std::string& what, int boundary_index, double boundary_value)
      : SolverError(what), boundary_index_(boundary_index), boundary_value_(boundary_value) {}

  /// Observation whose denominator reached the feasibility boundary, or -1
  /// when the certificate is a one-signed ratio column.
  int boundary_index() const noexcept { return boundary_index_; }
  double boundary_value() const noexcept { return boundary_value_; }

 private:
  int boundary_index_;
  double boundary_value_;
};

class NonConvergenceError : public SolverError {
 public:
  using SolverError::SolverError;
};

}  // namespace oslsel
