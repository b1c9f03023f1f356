#pragma once

#include <stdexcept>
#include <string>

namespace dcr {

// Base of all library errors. `kind()` is the machine-readable tag the CLI
// reports in its error record.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message) : Error("config", message) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& message) : Error("data", message) {}
};

// Raised by the training loop when a loss becomes non-finite.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& message) : Error("numeric", message) {}
};

}  // namespace dcr
