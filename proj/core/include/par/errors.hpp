#pragma once

#include <stdexcept>
#include <string>

namespace par {

// Base for all library errors. The CLI maps categories to exit codes:
// usage 1, validation/parse 2, everything else 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Structurally unreadable input (not JSON, truncated binary, bad magic).
class ParseError : public Error {
 public:
  using Error::Error;
};

// Input that parses but violates a schema or invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Tensor shape mismatch; message names both shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// An operation precondition was broken (empty mask, missing placeholder, ...).
// The trainer treats these as per-instance skips rather than fatal errors.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// Filesystem failures; message carries the path.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace par
