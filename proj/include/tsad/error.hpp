#pragma once

#include <stdexcept>
#include <string>

namespace tsad {

// Failure classes map onto distinct CLI exit codes.
enum class ErrorKind {
  kUsage,    // bad flags / configuration
  kData,     // I/O, format, validation
  kNumeric,  // divergence, non-finite values
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ErrorKind::kUsage, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::kData, what) {}
};

/// Raised on malformed PEFG / model files. `reason` is a stable short tag
/// ("bad magic", "truncated payload", ...) so callers can tell failures apart.
class FormatError : public DataError {
 public:
  FormatError(std::string reason, const std::string& detail)
      : DataError(reason + ": " + detail), reason_(std::move(reason)) {}
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::string reason_;
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error(ErrorKind::kNumeric, what) {}
};

int exit_code_for(ErrorKind kind) noexcept;

}  // namespace tsad
