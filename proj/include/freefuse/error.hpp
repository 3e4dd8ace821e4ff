#pragma once

#include <stdexcept>
#include <string>

namespace freefuse {

enum class ErrorCode {
  io,
  bad_magic,
  version_mismatch,
  truncated,
  non_finite,
  shape,
  degenerate_row,
  invalid_argument,
  parse,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::io: return "io";
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::version_mismatch: return "version_mismatch";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::shape: return "shape";
    case ErrorCode::degenerate_row: return "degenerate_row";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::parse: return "parse";
  }
  return "unknown";
}

// Single exception type for the library. The code decides the CLI exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  // 2 usage/parse/format, 3 shape, 4 numeric-degenerate.
  int exit_code() const noexcept {
    switch (code_) {
      case ErrorCode::shape: return 3;
      case ErrorCode::degenerate_row: return 4;
      default: return 2;
    }
  }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace freefuse
