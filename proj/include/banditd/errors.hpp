#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace banditd {

enum class ErrorCode {
  SchemaViolation,
  InvalidValue,
  DimensionError,
  NoArms,
  UnknownArm,
  DuplicateArm,
  NoEligibleArm,
  DuplicateDecision,
  UnknownWindow,
  ModelNotFound,
  CorruptData,
  EmptyReport,
  InsufficientSpan,
  NoMatches,
  TuningInconclusive,
  SourceUnavailable,
  ConfigError,
  IoError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::InvalidValue: return "InvalidValue";
    case ErrorCode::DimensionError: return "DimensionError";
    case ErrorCode::NoArms: return "NoArms";
    case ErrorCode::UnknownArm: return "UnknownArm";
    case ErrorCode::DuplicateArm: return "DuplicateArm";
    case ErrorCode::NoEligibleArm: return "NoEligibleArm";
    case ErrorCode::DuplicateDecision: return "DuplicateDecision";
    case ErrorCode::UnknownWindow: return "UnknownWindow";
    case ErrorCode::ModelNotFound: return "ModelNotFound";
    case ErrorCode::CorruptData: return "CorruptData";
    case ErrorCode::EmptyReport: return "EmptyReport";
    case ErrorCode::InsufficientSpan: return "InsufficientSpan";
    case ErrorCode::NoMatches: return "NoMatches";
    case ErrorCode::TuningInconclusive: return "TuningInconclusive";
    case ErrorCode::SourceUnavailable: return "SourceUnavailable";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

/// All library failures are reported through this exception; `code()` is the
/// stable machine-readable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace banditd
