#pragma once

#include <stdexcept>
#include <string>

namespace ilql {

// Error categories surfaced to callers and, through the CLI, as machine-readable JSON.
enum class ErrorKind {
    shape,        // tensor/graph shape or rank violation
    domain,       // bad argument value (probabilities, rates, sizes, ...)
    io,           // file/parse problems
    numeric,      // non-finite values where finite ones are required
    state,        // operation not valid in the current state
};

inline const char* error_kind_name(ErrorKind k) {
    switch (k) {
        case ErrorKind::shape: return "shape";
        case ErrorKind::domain: return "domain";
        case ErrorKind::io: return "io";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::state: return "state";
    }
    return "unknown";
}

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

inline void require(bool ok, ErrorKind kind, const std::string& message) {
    if (!ok) fail(kind, message);
}

}  // namespace ilql
