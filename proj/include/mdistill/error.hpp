#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mdistill {

enum class ErrorCode {
  DegenerateCloud,
  BadCount,
  BadAngle,
  NegativeSigma,
  BadFraction,
  NonOrthonormal,
  DegeneratePatch,
  ShapeMismatch,
  NonFinite,
  NotScalar,
  TapeConsumed,
  BadTemperature,
  BadBins,
  LabelOutOfRange,
  EmptyTestSet,
  BadGrid,
  BadSpec,
  BadProtocol,
  BadConfig,
  ParseError,
  IoError,
  SchemaMismatch,
};

inline std::string_view to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::DegenerateCloud: return "DegenerateCloud";
    case ErrorCode::BadCount: return "BadCount";
    case ErrorCode::BadAngle: return "BadAngle";
    case ErrorCode::NegativeSigma: return "NegativeSigma";
    case ErrorCode::BadFraction: return "BadFraction";
    case ErrorCode::NonOrthonormal: return "NonOrthonormal";
    case ErrorCode::DegeneratePatch: return "DegeneratePatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::NotScalar: return "NotScalar";
    case ErrorCode::TapeConsumed: return "TapeConsumed";
    case ErrorCode::BadTemperature: return "BadTemperature";
    case ErrorCode::BadBins: return "BadBins";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::EmptyTestSet: return "EmptyTestSet";
    case ErrorCode::BadGrid: return "BadGrid";
    case ErrorCode::BadSpec: return "BadSpec";
    case ErrorCode::BadProtocol: return "BadProtocol";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::SchemaMismatch: return "SchemaMismatch";
  }
  return "Unknown";
}

/// Every failure in the library is reported as an Error carrying a code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool ok, ErrorCode code, const std::string& what) {
  if (!ok) throw Error(code, what);
}

}  // namespace mdistill
