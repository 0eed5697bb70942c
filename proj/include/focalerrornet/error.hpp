#pragma once

#include <stdexcept>
#include <string>

namespace fen {

/// Failure categories. The CLI maps each one to a distinct exit code.
enum class ErrorKind {
  dimension,  // shape mismatch between operands
  numeric,    // NaN/Inf produced, non-finite loss or gradient
  ill_posed,  // singular system, zero-variance statistic
  value,      // argument outside its documented domain
  format,     // bad magic, version, checksum or schema
  io,         // missing or unreadable file
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace fen
