#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace hst {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or extent violation (mismatched operands, non-positive sizes).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. backward() on a non-scalar.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Token layout cannot be mapped onto a spatial grid.
class LayoutError : public Error {
 public:
  using Error::Error;
};

/// Backbone taps and side-network blocks do not line up.
class WiringError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary file. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class AuditError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values encountered during training.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::vector<std::string> offenders)
      : Error(what), offenders_(std::move(offenders)) {}
  const std::vector<std::string>& offenders() const noexcept { return offenders_; }

 private:
  std::vector<std::string> offenders_;
};

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace hst
