#pragma once

#include <stdexcept>
#include <string>

namespace biaten {

// Violated precondition or shape contract. CLI exit code 2.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Non-finite value or failed numerical safeguard. CLI exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Base of every binary-format failure. CLI exit code 2.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedFileError : public FormatError {
 public:
  using FormatError::FormatError;
};

class InconsistentCountsError : public FormatError {
 public:
  using FormatError::FormatError;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

}  // namespace detail
}  // namespace biaten
