#pragma once

#include <stdexcept>
#include <string>

namespace calflow {

enum class ErrorCode {
  InvalidArgument,
  ShapeMismatch,
  OutOfBounds,
  EmptyInput,
  FileNotFound,
  UnsupportedBitDepth,
  UnsupportedColorType,
  DecodeFailed,
  WriteFailed,
  MalformedManifest,
  MalformedCheckpoint,
  GridMismatch,
  NotNormalized,
  NonFinite,
  NotInitialized,
  AlreadyInitialized,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid argument";
    case ErrorCode::ShapeMismatch: return "shape mismatch";
    case ErrorCode::OutOfBounds: return "out of bounds";
    case ErrorCode::EmptyInput: return "empty input";
    case ErrorCode::FileNotFound: return "file not found";
    case ErrorCode::UnsupportedBitDepth: return "unsupported bit depth";
    case ErrorCode::UnsupportedColorType: return "unsupported color type";
    case ErrorCode::DecodeFailed: return "decode failed";
    case ErrorCode::WriteFailed: return "write failed";
    case ErrorCode::MalformedManifest: return "malformed manifest";
    case ErrorCode::MalformedCheckpoint: return "malformed checkpoint";
    case ErrorCode::GridMismatch: return "grid mismatch";
    case ErrorCode::NotNormalized: return "histogram not normalized";
    case ErrorCode::NonFinite: return "non-finite value";
    case ErrorCode::NotInitialized: return "not initialized";
    case ErrorCode::AlreadyInitialized: return "already initialized";
  }
  return "unknown error";
}

/// Exception type thrown by every calflow operation. The code lets callers
/// (the CLI in particular) map failures onto exit statuses.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  bool is_io() const noexcept {
    switch (code_) {
      case ErrorCode::FileNotFound:
      case ErrorCode::UnsupportedBitDepth:
      case ErrorCode::UnsupportedColorType:
      case ErrorCode::DecodeFailed:
      case ErrorCode::WriteFailed:
      case ErrorCode::MalformedManifest:
      case ErrorCode::MalformedCheckpoint:
        return true;
      default:
        return false;
    }
  }

 private:
  ErrorCode code_;
};

namespace detail {

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace detail
}  // namespace calflow
