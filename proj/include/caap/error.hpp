#pragma once

#include <stdexcept>
#include <string>

namespace caap {

// Broad failure classes; the CLI maps each to a distinct exit code.
enum class ErrorKind {
  kShape,    // tensor/image extents disagree
  kFormat,   // malformed or corrupt file content
  kIo,       // file cannot be opened/written
  kConfig,   // contradictory or out-of-range configuration
  kRange,    // index outside its domain
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kRange: return "range";
  }
  return "unknown";
}

}  // namespace caap
