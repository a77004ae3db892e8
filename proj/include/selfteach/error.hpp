// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace selfteach {

enum class ErrorCode {
  invalid_input,
  empty_input,
  configuration,
  invalid_state,
  parse,
  bad_magic,
  io,
  numerical,
};

inline const char *to_string(ErrorCode code) {
  switch (code) {
  case ErrorCode::invalid_input: return "invalid-input";
  case ErrorCode::empty_input: return "empty-input";
  case ErrorCode::configuration: return "configuration";
  case ErrorCode::invalid_state: return "invalid-state";
  case ErrorCode::parse: return "parse";
  case ErrorCode::bad_magic: return "bad-magic";
  case ErrorCode::io: return "io";
  case ErrorCode::numerical: return "numerical";
  }
  return "unknown";
}

class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string &what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

private:
  ErrorCode code_;
};

/// Malformed binary input. `offset` is the byte position where decoding
/// stopped.
class ParseError : public Error {
public:
  ParseError(ErrorCode code, std::uint64_t offset, const std::string &what)
      : Error(code, what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

private:
  std::uint64_t offset_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string &what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string &what) {
  if (!cond) fail(code, what);
}

} // namespace selfteach
