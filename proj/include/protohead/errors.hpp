#pragma once

#include <stdexcept>
#include <string>

namespace protohead {

enum class ErrorCode {
  kZeroNormRow,
  kNonPositiveTemperature,
  kKOutOfRange,
  kNonFiniteLoss,
  kNonFiniteValue,
  kNonFiniteTerm,
  kShapeMismatch,
  kIoFailure,
  kInvariantViolation,
  kBadMagic,
  kVersionMismatch,
  kTruncatedFile,
  kSizeMismatch,
  kInfeasibleLayout,
  kOverlapTooSmall,
  kEmptyOverlap,
  kLabelOutOfRange,
  kBatchTooSmall,
  kNoActivePrototypes,
  kConfigError,
};

const char* to_string(ErrorCode code);

// Every failure raised by the library carries one of the codes above so that
// callers (tests, the CLI exit-code mapping) can branch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace protohead
