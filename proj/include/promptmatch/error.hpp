#pragma once

#include <stdexcept>
#include <string>

namespace promptmatch {

// Base of every exception thrown by the library. The CLI maps the
// subclasses onto exit codes (data 1, usage 2, backend/runtime 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input data: pool files, embeddings, checkpoints.
class DataError : public Error {
 public:
  using Error::Error;
};

// Vectors or matrices whose shapes do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller violated an operation precondition (terminal step, masked action...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class BackendError : public Error {
 public:
  BackendError(const std::string& what, bool retryable = false)
      : Error(what), retryable_(retryable) {}
  bool retryable() const noexcept { return retryable_; }

 private:
  bool retryable_;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace promptmatch
