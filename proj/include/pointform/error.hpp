#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pointform {

enum class ErrorKind {
  Usage,      // bad invocation or API misuse
  Config,     // invalid configuration values
  Input,      // invalid input data (empty cloud, bad counts)
  Data,       // dataset / ingestion failures
  Dimension,  // shape mismatch
  Numeric,    // NaN / non-finite values
  Format,     // malformed file contents
};

inline std::string_view kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage: return "usage";
    case ErrorKind::Config: return "config";
    case ErrorKind::Input: return "input";
    case ErrorKind::Data: return "data";
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Format: return "format";
  }
  return "unknown";
}

/// Process exit code for each error kind: 2 usage, 3 data, 4 numeric, 5 format.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage:
    case ErrorKind::Config: return 2;
    case ErrorKind::Input:
    case ErrorKind::Data: return 3;
    case ErrorKind::Dimension:
    case ErrorKind::Numeric: return 4;
    case ErrorKind::Format: return 5;
  }
  return 1;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace pointform
