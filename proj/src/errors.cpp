#include "protohead/errors.hpp"

namespace protohead {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kZeroNormRow: return "ZeroNormRow";
    case ErrorCode::kNonPositiveTemperature: return "NonPositiveTemperature";
    case ErrorCode::kKOutOfRange: return "KOutOfRange";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kNonFiniteValue: return "NonFiniteValue";
    case ErrorCode::kNonFiniteTerm: return "NonFiniteTerm";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kIoFailure: return "IoFailure";
    case ErrorCode::kInvariantViolation: return "InvariantViolation";
    case ErrorCode::kBadMagic: return "BadMagic";
    case ErrorCode::kVersionMismatch: return "VersionMismatch";
    case ErrorCode::kTruncatedFile: return "TruncatedFile";
    case ErrorCode::kSizeMismatch: return "SizeMismatch";
    case ErrorCode::kInfeasibleLayout: return "InfeasibleLayout";
    case ErrorCode::kOverlapTooSmall: return "OverlapTooSmall";
    case ErrorCode::kEmptyOverlap: return "EmptyOverlap";
    case ErrorCode::kLabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::kBatchTooSmall: return "BatchTooSmall";
    case ErrorCode::kNoActivePrototypes: return "NoActivePrototypes";
    case ErrorCode::kConfigError: return "ConfigError";
  }
  return "Unknown";
}

}  // namespace protohead
