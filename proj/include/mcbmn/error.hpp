// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mcbmn {

// Error classes are stable identifiers; the CLI prints them verbatim.
enum class ErrorCode {
  kDimensionMismatch,
  kDomainError,
  kNonFinite,
  kInvalidArgument,
  kGraphError,
  kDatasetNotFound,
  kDatasetInvalid,
  kConfigError,
  kCheckpointMismatch,
  kIoError,
};

std::string_view error_class(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace mcbmn
