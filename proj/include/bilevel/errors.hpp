#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace bilevel {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user input: malformed configuration, unknown keys, inconsistent sizes.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed IDX payload. `offset` is the byte position where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Numerical failures of the solvers.
class SolverError : public Error {
 public:
  using Error::Error;
};

/// q >= 1 in the momentum recursion (condition number <= 1).
class InvalidConditioning : public SolverError {
 public:
  using SolverError::SolverError;
};

/// A rate-based bound with rate factor 1 can never certify anything.
class DegenerateRate : public SolverError {
 public:
  using SolverError::SolverError;
};

class NotStronglyConvex : public SolverError {
 public:
  using SolverError::SolverError;
};

class ZeroMatrix : public SolverError {
 public:
  using SolverError::SolverError;
};

/// A FISTA iterate stopped being finite.
class Divergence : public SolverError {
 public:
  Divergence(const std::string& what, std::size_t iteration)
      : SolverError(what), iteration_(iteration) {}
  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

/// The iteration cap was hit before the certificate reached the target.
class AccuracyUnreachable : public SolverError {
 public:
  AccuracyUnreachable(const std::string& what, double best_certificate,
                      std::optional<std::size_t> task = std::nullopt)
      : SolverError(what), best_certificate_(best_certificate), task_(task) {}
  double best_certificate() const noexcept { return best_certificate_; }
  std::optional<std::size_t> task() const noexcept { return task_; }

 private:
  double best_certificate_;
  std::optional<std::size_t> task_;
};

/// Interpolation points do not span the parameter space.
class DegenerateGeometry : public SolverError {
 public:
  using SolverError::SolverError;
};

/// The box cannot host an affinely independent interpolation set.
class InfeasibleGeometry : public SolverError {
 public:
  using SolverError::SolverError;
};

/// The trust-region step did not decrease the model.
class InvalidStep : public SolverError {
 public:
  using SolverError::SolverError;
};

class SizeError : public Error {
 public:
  using Error::Error;
};

}  // namespace bilevel
