// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pkt {

enum class ErrorKind {
  kInvalidInput,
  kRank,
  kShape,
  kConfig,
  kData,
  kState,
  kFormat,
  kTraining,
  kSize,
  kIo,
  kStage,
};

std::string_view to_string(ErrorKind kind);

// Single exception type for the toolkit; the kind says which contract was
// violated so callers (and tests) can dispatch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + message),
        kind_(kind) {}

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

}  // namespace pkt
