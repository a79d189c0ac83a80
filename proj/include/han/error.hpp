#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace han {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor dimensions disagree with what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value. field() names the offending entry.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message)
      : Error(message), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// Malformed or truncated file content. offset() is the byte position where
// decoding stopped.
class FormatError : public Error {
 public:
  FormatError(std::size_t offset, const std::string& message)
      : Error(message + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// API called in the wrong state, e.g. backward without a recorded forward.
class UsageError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace han
