#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fodf {

/// Every failure the toolkit reports. One enumerator per documented error condition.
enum class ErrorCode {
  // volume_io
  MalformedHeader,
  PayloadSizeMismatch,
  UnsupportedDtype,
  IoFailure,
  InvariantViolation,
  ColumnCountMismatch,
  NonUnitVector,
  ParseError,
  ShapeBlobMismatch,
  UnknownLayerKind,
  // sphere
  TooFewDirections,
  KeepBelowShMinimum,
  UniformityUnattainable,
  UnderdeterminedDesign,
  // sh
  OddOrder,
  UnderdeterminedFit,
  SingularSystem,
  DegenerateAnisotropy,
  // phantom
  ShapeTooSmall,
  MissingNoiselessSource,
  // csd
  EmptyMask,
  TooFewAnisotropicVoxels,
  NonConvergence,
  // net / trainer
  ShapeMismatch,
  NoPairsForBeta,
  DivergenceDetected,
  // eval
  DimsMismatch,
  TooFewNonzeroPairs,
  // connectome
  DisconnectedGraph,
  ZeroWeightGraph,
  AsymmetricMatrix,
  NegativeWeight,
  // cli
  UsageError,
};

constexpr std::string_view to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::PayloadSizeMismatch: return "PayloadSizeMismatch";
    case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::InvariantViolation: return "InvariantViolation";
    case ErrorCode::ColumnCountMismatch: return "ColumnCountMismatch";
    case ErrorCode::NonUnitVector: return "NonUnitVector";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::ShapeBlobMismatch: return "ShapeBlobMismatch";
    case ErrorCode::UnknownLayerKind: return "UnknownLayerKind";
    case ErrorCode::TooFewDirections: return "TooFewDirections";
    case ErrorCode::KeepBelowShMinimum: return "KeepBelowShMinimum";
    case ErrorCode::UniformityUnattainable: return "UniformityUnattainable";
    case ErrorCode::UnderdeterminedDesign: return "UnderdeterminedDesign";
    case ErrorCode::OddOrder: return "OddOrder";
    case ErrorCode::UnderdeterminedFit: return "UnderdeterminedFit";
    case ErrorCode::SingularSystem: return "SingularSystem";
    case ErrorCode::DegenerateAnisotropy: return "DegenerateAnisotropy";
    case ErrorCode::ShapeTooSmall: return "ShapeTooSmall";
    case ErrorCode::MissingNoiselessSource: return "MissingNoiselessSource";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::TooFewAnisotropicVoxels: return "TooFewAnisotropicVoxels";
    case ErrorCode::NonConvergence: return "NonConvergence";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NoPairsForBeta: return "NoPairsForBeta";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::DimsMismatch: return "DimsMismatch";
    case ErrorCode::TooFewNonzeroPairs: return "TooFewNonzeroPairs";
    case ErrorCode::DisconnectedGraph: return "DisconnectedGraph";
    case ErrorCode::ZeroWeightGraph: return "ZeroWeightGraph";
    case ErrorCode::AsymmetricMatrix: return "AsymmetricMatrix";
    case ErrorCode::NegativeWeight: return "NegativeWeight";
    case ErrorCode::UsageError: return "UsageError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace fodf
