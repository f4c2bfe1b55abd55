#pragma once

#include <stdexcept>
#include <string>

namespace glc {

/// Failure classes. The CLI maps these onto process exit codes.
enum class ErrorKind {
  shape,      // tensor extents do not agree
  config,     // invalid model / run configuration
  usage,      // API misuse (non-scalar loss, missing gradient, ...)
  dataset,    // malformed dataset directory or manifest
  version,    // unsupported on-disk format version
  checksum,   // stored bytes do not match their checksum
  truncated,  // file shorter than its manifest claims
  numeric,    // non-finite value where a finite one is required
  io,         // filesystem failure
  check,      // a verification check did not pass
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::shape: return "shape";
    case ErrorKind::config: return "config";
    case ErrorKind::usage: return "usage";
    case ErrorKind::dataset: return "dataset";
    case ErrorKind::version: return "version";
    case ErrorKind::checksum: return "checksum";
    case ErrorKind::truncated: return "truncated";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::io: return "io";
    case ErrorKind::check: return "check";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace glc
