#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace uprm {

// Error families. The CLI maps each family onto an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes that do not chain (matmul, FFN input width, parameter dims).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or unknown configuration key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Parse failure in a line-oriented file. `line` is 1-based.
class ParseError : public DataError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : DataError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Unsupported file format or version.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

/// Non-finite values, divergence, failed numerical checks.
class NumericError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace uprm
