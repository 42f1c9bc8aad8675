#pragma once

#include <stdexcept>
#include <string>

namespace tfl {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible (mismatched dims, bad axis, ...).
class ShapeError : public Error {
public:
  using Error::Error;
};

/// A layer/model/run configuration is invalid.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Unknown identifier (catalog id, layer name, config key).
class LookupError : public Error {
public:
  using Error::Error;
};

/// An API precondition was violated by the caller.
class ContractError : public Error {
public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
  using Error::Error;
};

/// File or dataset could not be read/written.
class IoError : public Error {
public:
  using Error::Error;
};

/// Checkpoint directory is inconsistent with its manifest.
class CheckpointError : public Error {
public:
  using Error::Error;
};

} // namespace tfl
