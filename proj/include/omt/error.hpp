#pragma once

#include <stdexcept>
#include <string>

namespace omt {

/// Base for every error the library raises. `error_class()` is the stable,
/// machine-readable tag the CLI reports.
class Error : public std::runtime_error {
 public:
  Error(std::string error_class, const std::string& what)
      : std::runtime_error(what), class_(std::move(error_class)) {}
  const std::string& error_class() const noexcept { return class_; }

 private:
  std::string class_;
};

// Malformed or inconsistent input (dimensions, ordering, PSD-ness).
class InvalidInput : public Error {
 public:
  explicit InvalidInput(const std::string& what) : Error("invalid_input", what) {}
};

// A matrix that should be invertible is not, to working tolerance.
class SingularMatrix : public Error {
 public:
  SingularMatrix(const std::string& what, double condition)
      : Error("singular_matrix", what), condition_(condition) {}
  double condition() const noexcept { return condition_; }

 private:
  double condition_;
};

// An iterative method hit its iteration cap.
class NotConverged : public Error {
 public:
  NotConverged(const std::string& what, double residual)
      : Error("not_converged", what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

class NumericalUnderflow : public Error {
 public:
  explicit NumericalUnderflow(const std::string& what) : Error("numerical_underflow", what) {}
};

class Infeasible : public Error {
 public:
  Infeasible(const std::string& what, double violation)
      : Error("infeasible", what), violation_(violation) {}
  double violation() const noexcept { return violation_; }

 private:
  double violation_;
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error("parse_error", what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io_error", what) {}
};

}  // namespace omt
