// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace ksm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not compose (conv channels, mask vs kernel, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation precondition (non-scalar loss, missing grad,
/// training a task on an unfrozen backbone, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A data invariant was violated, e.g. overlapping binary/scale support.
class InvariantError : public Error {
 public:
  using Error::Error;
};

class UnknownTaskError : public Error {
 public:
  using Error::Error;
};

/// Input files or directories are absent.
class DataMissingError : public Error {
 public:
  using Error::Error;
};

enum class FormatErrorKind {
  kBadMagic,
  kUnsupportedVersion,
  kTruncated,
  kCountMismatch,
  kBadRecordSize,
  kHashMismatch,
  kMalformed,
};

inline const char* to_string(FormatErrorKind kind) {
  switch (kind) {
    case FormatErrorKind::kBadMagic: return "bad magic";
    case FormatErrorKind::kUnsupportedVersion: return "unsupported version";
    case FormatErrorKind::kTruncated: return "truncated";
    case FormatErrorKind::kCountMismatch: return "count mismatch";
    case FormatErrorKind::kBadRecordSize: return "bad record size";
    case FormatErrorKind::kHashMismatch: return "hash mismatch";
    case FormatErrorKind::kMalformed: return "malformed";
  }
  return "unknown";
}

class FormatError : public Error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : Error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

}  // namespace ksm
