#pragma once

#include <stdexcept>
#include <string>

namespace chartrans {

// Exit codes used by the command-line tool. Every error class below maps to
// exactly one of them.
enum class ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kIo = 2,
  kData = 3,
  kNumeric = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept = 0;
};

class UsageError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kUsage; }
};

class IoError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kIo; }
};

// Malformed or inconsistent data: bad shapes, ids outside a vocabulary,
// corrupt files, config schema violations.
class DataError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kData; }
};

class ShapeError : public DataError {
 public:
  using DataError::DataError;
};

class VocabError : public DataError {
 public:
  using DataError::DataError;
};

class NumericError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kNumeric; }
};

}  // namespace chartrans
