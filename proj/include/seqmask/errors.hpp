#pragma once

#include <stdexcept>
#include <string>

namespace seqmask {

/// A precondition of a public operation was not met by the caller.
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A computation produced or received a non-finite or undefined value.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Base for checkpoint load failures.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CorruptCheckpoint : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class VersionMismatch : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class HashMismatch : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// Missing file, unreadable image, bad manifest record, unwritable output.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractViolation(what);
}
}  // namespace detail

}  // namespace seqmask
