#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace stclip {

// Base for every error raised by the library. code() is the stable
// machine-readable tag printed by the CLI as `ERR <code>: <message>`.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& m) : Error("DIMENSION", m) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error("CONFIG", m) {}
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& m) : Error("INPUT", m) {}
};

class EmptyContextError : public Error {
 public:
  explicit EmptyContextError(const std::string& m) : Error("EMPTY_CONTEXT", m) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& m) : Error("NUMERIC", m) {}
};

class EvaluationError : public Error {
 public:
  explicit EvaluationError(const std::string& m) : Error("EVALUATION", m) {}
};

class FormatError : public Error {
 public:
  FormatError(const std::string& m, std::uint64_t offset)
      : Error("FORMAT", m + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace stclip
