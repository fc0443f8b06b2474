#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace oculoscreen {

enum class ErrorCode {
  kUnreadableImage,
  kParseError,
  kDuplicateIdentity,
  kInvalidPolicy,
  kInvalidArgument,
  kNoEyeFound,
  kDegenerateBox,
  kShapeMismatch,
  kMissingAngle,
  kEmptySplit,
  kSingleClassSplit,
  kCohortTooSmall,
  kOneClassOnly,
  kUnknownIdentity,
  kIoError,
  kConsentMissing,
  kNotFound,
  kConflict,
  kNoModel,
  kValidationFailed,
};

inline constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUnreadableImage: return "UNREADABLE_IMAGE";
    case ErrorCode::kParseError: return "PARSE_ERROR";
    case ErrorCode::kDuplicateIdentity: return "DUPLICATE_IDENTITY";
    case ErrorCode::kInvalidPolicy: return "INVALID_POLICY";
    case ErrorCode::kInvalidArgument: return "INVALID_ARGUMENT";
    case ErrorCode::kNoEyeFound: return "NO_EYE_FOUND";
    case ErrorCode::kDegenerateBox: return "DEGENERATE_BOX";
    case ErrorCode::kShapeMismatch: return "SHAPE_MISMATCH";
    case ErrorCode::kMissingAngle: return "MISSING_ANGLE";
    case ErrorCode::kEmptySplit: return "EMPTY_SPLIT";
    case ErrorCode::kSingleClassSplit: return "SINGLE_CLASS_SPLIT";
    case ErrorCode::kCohortTooSmall: return "COHORT_TOO_SMALL";
    case ErrorCode::kOneClassOnly: return "ONE_CLASS_ONLY";
    case ErrorCode::kUnknownIdentity: return "UNKNOWN_IDENTITY";
    case ErrorCode::kIoError: return "IO_ERROR";
    case ErrorCode::kConsentMissing: return "CONSENT_MISSING";
    case ErrorCode::kNotFound: return "NOT_FOUND";
    case ErrorCode::kConflict: return "CONFLICT";
    case ErrorCode::kNoModel: return "NO_MODEL";
    case ErrorCode::kValidationFailed: return "VALIDATION_FAILED";
  }
  return "UNKNOWN";
}

// All library failures surface as Error; what() carries "CODE: detail".
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail),
        code_(code),
        detail_(detail) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace oculoscreen
