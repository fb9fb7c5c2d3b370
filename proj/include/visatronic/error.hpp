#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace visatronic {

enum class ErrorKind {
  kEmptyInput,
  kDegenerateRange,
  kCorruptSequence,
  kCorruptGrid,
  kShape,
  kLayout,
  kFormat,
  kConfig,
  kContract,
  kNumeric,
  kInfeasibleTiming,
  kEmptyLoss,
  kIo,
  kUsage,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kEmptyInput: return "empty_input";
    case ErrorKind::kDegenerateRange: return "degenerate_range";
    case ErrorKind::kCorruptSequence: return "corrupt_sequence";
    case ErrorKind::kCorruptGrid: return "corrupt_grid";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kLayout: return "layout";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kContract: return "contract";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kInfeasibleTiming: return "infeasible_timing";
    case ErrorKind::kEmptyLoss: return "empty_loss";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kUsage: return "usage";
  }
  return "unknown";
}

// All library failures surface as this exception; `kind()` is stable and
// is what the CLI prints.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace visatronic
