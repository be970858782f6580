#pragma once

#include <stdexcept>
#include <string>

namespace mphm {

/// Base of every error raised by the library. `exit_code()` is what the CLI
/// returns when the error escapes a subcommand.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

/// Invalid hyperparameters, toggles or config files.
class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Tensor shapes or layouts that do not fit together.
class StructuralError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Missing, unreadable or inconsistent files and datasets.
class DataError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

/// Checkpoint that is truncated, corrupt, or built for another config.
class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

class ConfigMismatchError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// NaN/Inf in activations, scans or losses.
class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

}  // namespace mphm
