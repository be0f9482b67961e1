#pragma once

#include <stdexcept>
#include <string>

namespace mldg {

// Broad failure classes. The CLI maps each one to a distinct exit code.
enum class ErrorKind {
  config,   // invalid options, schema or argument values
  data,     // malformed manifests, feature files, score sets
  numeric,  // NaN/Inf losses, aborted training
  shape,    // tensor shape mismatches inside an op
  state,    // API misuse such as reusing a consumed graph
  io,       // filesystem failures
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace mldg
