#pragma once

#include <stdexcept>
#include <string>

namespace knnqe {

// Process exit codes shared by every subcommand.
enum class ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kValidation = 2,
  kRuntime = 3,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::kRuntime; }
};

// Caller-side mistakes: bad flags, violated preconditions.
class InvalidArgument : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kUsage; }
};

// Input data that breaks one of the on-disk format contracts.
class ValidationError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kValidation; }
};

// Well-formed data on which a computation is undefined or impossible.
class DataError : public Error {
 public:
  using Error::Error;
};

// Constant input to a correlation or normalisation.
class DegenerateInput : public DataError {
 public:
  using DataError::DataError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class DiskFull : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace knnqe
