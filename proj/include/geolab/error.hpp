#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace geolab {

enum class ErrorKind {
  DegeneratePose,
  ZeroMatrix,
  InvalidCrop,
  DegenerateLine,
  LengthMismatch,
  ShapeMismatch,
  MissingGradient,
  ConfigUnsatisfiable,
  DepthOutOfRange,
  EmptyInlierSet,
  SizeExceedsDataset,
  FormatError,
  ShapeError,
  DegenerateSet,
  TooFewPoints,
  DegenerateConfiguration,
  ConsensusFailure,
  DegenerateVariance,
  NonFiniteLoss,
  TaskMismatch,
  ConfigError,
  DataError,
  IOError,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::DegeneratePose: return "DegeneratePose";
    case ErrorKind::ZeroMatrix: return "ZeroMatrix";
    case ErrorKind::InvalidCrop: return "InvalidCrop";
    case ErrorKind::DegenerateLine: return "DegenerateLine";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::MissingGradient: return "MissingGradient";
    case ErrorKind::ConfigUnsatisfiable: return "ConfigUnsatisfiable";
    case ErrorKind::DepthOutOfRange: return "DepthOutOfRange";
    case ErrorKind::EmptyInlierSet: return "EmptyInlierSet";
    case ErrorKind::SizeExceedsDataset: return "SizeExceedsDataset";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::DegenerateSet: return "DegenerateSet";
    case ErrorKind::TooFewPoints: return "TooFewPoints";
    case ErrorKind::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorKind::ConsensusFailure: return "ConsensusFailure";
    case ErrorKind::DegenerateVariance: return "DegenerateVariance";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::TaskMismatch: return "TaskMismatch";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::DataError: return "DataError";
    case ErrorKind::IOError: return "IOError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// CLI exit codes: 2 config, 3 data, 4 numerical.
constexpr int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ConfigError:
    case ErrorKind::ConfigUnsatisfiable:
    case ErrorKind::DepthOutOfRange:
    case ErrorKind::TaskMismatch:
      return 2;
    case ErrorKind::FormatError:
    case ErrorKind::ShapeError:
    case ErrorKind::DataError:
    case ErrorKind::IOError:
    case ErrorKind::SizeExceedsDataset:
    case ErrorKind::InvalidCrop:
    case ErrorKind::EmptyInlierSet:
    case ErrorKind::LengthMismatch:
    case ErrorKind::TooFewPoints:
      return 3;
    default:
      return 4;
  }
}

}  // namespace geolab
