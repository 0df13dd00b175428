#pragma once

#include <stdexcept>
#include <string>

namespace bfm {

// Typed failure categories. The numeric values are part of the C ABI
// (see include/bfm/bfm.h) and must not be reordered.
enum class ErrorCode : int {
  Ok = 0,
  IoError = 1,
  FormatError = 2,
  UnsupportedShape = 3,
  UnsupportedDatatype = 4,
  DuplicateModality = 5,
  NotFound = 6,
  InvalidName = 7,
  UnknownModality = 8,
  DimensionMismatch = 9,
  ShapeError = 10,
  RangeError = 11,
  EmptyBatch = 12,
  EmptySession = 13,
  DegenerateLoss = 14,
  InsufficientBatch = 15,
  NonFiniteLoss = 16,
  NonFiniteGradient = 17,
  VersionError = 18,
  ConfigError = 19,
  InvalidArgument = 20,
  Internal = 99,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, std::string(error_code_name(code)) + ": " + message);
}

}  // namespace bfm
