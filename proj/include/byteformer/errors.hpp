#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace byteformer {

// Process exit codes used by the CLI. Every error type maps onto one.
enum class ExitCode : int { ok = 0, usage = 1, data = 2, numeric = 3 };

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ExitCode code = ExitCode::data, std::string reason = {})
      : std::runtime_error(what), code_(code), reason_(reason.empty() ? what : std::move(reason)) {}
  ExitCode code() const noexcept { return code_; }
  // Message without the category prefix.
  const std::string& reason() const noexcept { return reason_; }

 private:
  ExitCode code_;
  std::string reason_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("dimension error: " + what, ExitCode::numeric, what) {}
};

class IndexError : public Error {
 public:
  explicit IndexError(const std::string& what) : Error("index error: " + what, ExitCode::data, what) {}
};

class SequenceTooShortError : public Error {
 public:
  SequenceTooShortError(std::size_t length, std::size_t kernel)
      : Error("sequence too short: length " + std::to_string(length) + " < kernel " + std::to_string(kernel),
              ExitCode::data),
        length_(length),
        kernel_(kernel) {}
  std::size_t length() const noexcept { return length_; }
  std::size_t kernel() const noexcept { return kernel_; }

 private:
  std::size_t length_;
  std::size_t kernel_;
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric failure: " + what, ExitCode::numeric, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error("data error: " + what, ExitCode::data, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("i/o error: " + what, ExitCode::data, what) {}
};

class EncodingError : public Error {
 public:
  explicit EncodingError(const std::string& what) : Error("encoding error: " + what, ExitCode::data, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what, ExitCode::usage, what) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error("usage error: " + what, ExitCode::usage, what) {}
};

}  // namespace byteformer
