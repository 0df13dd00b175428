#include "error.hpp"

namespace bfm {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::Ok: return "Ok";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::UnsupportedShape: return "UnsupportedShape";
    case ErrorCode::UnsupportedDatatype: return "UnsupportedDatatype";
    case ErrorCode::DuplicateModality: return "DuplicateModality";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::InvalidName: return "InvalidName";
    case ErrorCode::UnknownModality: return "UnknownModality";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::RangeError: return "RangeError";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::EmptySession: return "EmptySession";
    case ErrorCode::DegenerateLoss: return "DegenerateLoss";
    case ErrorCode::InsufficientBatch: return "InsufficientBatch";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::VersionError: return "VersionError";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Internal: return "Internal";
  }
  return "Unknown";
}

}  // namespace bfm
