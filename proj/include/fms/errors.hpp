#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace fms {

/// Root of every error the simulator raises on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke a documented precondition (bad dimensions, out-of-range
/// arguments, inconsistent configuration).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// A computation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// SGD iterates became non-finite. Carries the failing step (1-based) and,
/// once it propagates out of a client update, the client id.
class DivergenceError : public NumericError {
 public:
  DivergenceError(std::size_t step, std::optional<std::size_t> client = std::nullopt)
      : NumericError(make_message(step, client)), step_(step), client_(client) {}

  std::size_t step() const { return step_; }
  const std::optional<std::size_t>& client() const { return client_; }

 private:
  static std::string make_message(std::size_t step, const std::optional<std::size_t>& client) {
    std::string msg = "divergence: non-finite parameters after step " + std::to_string(step);
    if (client) msg += " on client " + std::to_string(*client);
    return msg;
  }

  std::size_t step_;
  std::optional<std::size_t> client_;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an analysis routine does not hold for the given trace.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

class FileNotFoundError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or trace version/spec mismatch.
class VersionError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace fms
