#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace iconnet {

/// Base of every error thrown by the library. The CLI maps these to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class UnsupportedCodecError : public FormatError {
 public:
  UnsupportedCodecError(const std::string& encoding)
      : FormatError("unsupported WAV encoding: " + encoding), encoding_(encoding) {}
  const std::string& encoding() const noexcept { return encoding_; }

 private:
  std::string encoding_;
};

class IngestionError : public Error {
 public:
  using Error::Error;
};

class CorruptModelError : public Error {
 public:
  CorruptModelError(const std::string& what, std::uint64_t offset)
      : Error("corrupt model file at offset " + std::to_string(offset) + ": " + what),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace iconnet
