#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace restune {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not conform to an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller broke a documented precondition (non-scalar loss, missing grad, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Two tuners requested for the same (block, op) slot.
class ConflictError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed binary input. Carries the byte offset where parsing stopped.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class ChecksumError : public Error {
 public:
  using Error::Error;
};

class EmptyDatasetError : public Error {
 public:
  using Error::Error;
};

// A stored tensor that is required, unknown, or of the wrong storage dtype.
class TensorMismatchError : public Error {
 public:
  using Error::Error;
};

}  // namespace restune
