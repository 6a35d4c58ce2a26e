#pragma once

#include <stdexcept>
#include <string>

namespace mmvpr {

/// Base of every error raised by the library. The CLI maps the concrete
/// type onto an exit code, so callers should catch the narrowest one they can handle.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Model or run configuration is inconsistent (head count, grid size, parameter shapes).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A file does not follow its binary or JSON layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A file payload is shorter or longer than its header promises.
class LengthError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Input data is unusable (non-finite values, too few places for a batch).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A value lies outside its documented domain (coordinates, empty query set).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a precondition that cannot be expressed in the type system.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A function under evaluation produced a non-finite value.
class EvaluationError : public Error {
 public:
  using Error::Error;
};

}  // namespace mmvpr
