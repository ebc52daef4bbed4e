#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rio {

enum class ErrorCode {
  ShapeMismatch,
  NonScalarLoss,
  DegenerateInput,
  InvalidConfig,
  CorruptCheckpoint,
  VersionMismatch,
  ZeroVector,
  TooShort,
  MissingGroundTruth,
  NonFiniteLoss,
  LengthMismatch,
  ZeroLengthGroundTruth,
  InvalidSpec,
  InvalidOnset,
  ParseError,
  IoError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonScalarLoss: return "NonScalarLoss";
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::TooShort: return "TooShort";
    case ErrorCode::MissingGroundTruth: return "MissingGroundTruth";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::ZeroLengthGroundTruth: return "ZeroLengthGroundTruth";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::InvalidOnset: return "InvalidOnset";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and the CLI's machine-readable error line) can branch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace rio
