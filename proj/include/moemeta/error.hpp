#pragma once

#include <stdexcept>
#include <string>

namespace moemeta {

enum class ErrorKind {
  kLoad,
  kValidation,
  kConfig,
  kDimension,
  kSampling,
  kNumeric,
  kEvaluation,
  kDeterminism,
};

// All library failures are reported through this one exception type; the kind
// decides the process exit code at the CLI boundary.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  // 1 for input problems (load/validation/config), 2 for everything raised at runtime.
  int exit_code() const noexcept {
    switch (kind_) {
      case ErrorKind::kLoad:
      case ErrorKind::kValidation:
      case ErrorKind::kConfig:
        return 1;
      default:
        return 2;
    }
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace moemeta
