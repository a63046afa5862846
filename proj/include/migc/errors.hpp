#pragma once

#include <stdexcept>
#include <string>

namespace migc {

enum class ErrorKind {
  kShape,
  kInvalidArgument,
  kNotFound,
  kConfig,
  kCapacity,
  kNumeric,
  kInput,
  kSchema,
  kBuild,
  kEmptyReport,
  kMissingState,
  kBatchShape,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kInvalidArgument: return "invalid argument";
    case ErrorKind::kNotFound: return "not found";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kCapacity: return "capacity error";
    case ErrorKind::kNumeric: return "numeric error";
    case ErrorKind::kInput: return "input error";
    case ErrorKind::kSchema: return "schema error";
    case ErrorKind::kBuild: return "build error";
    case ErrorKind::kEmptyReport: return "empty report";
    case ErrorKind::kMissingState: return "missing state";
    case ErrorKind::kBatchShape: return "batch-shape error";
  }
  return "error";
}

/// Every failure raised by the library carries one of the kinds above so the
/// CLI can map it onto an exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace migc
