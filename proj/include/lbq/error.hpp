// error.hpp - Exception types shared across the toolkit.
//
// Each class maps onto one failure family so the CLI can translate them
// into stable exit codes (config/usage vs. data/format vs. internal).

#ifndef LBQ_ERROR_HPP
#define LBQ_ERROR_HPP

#include <stdexcept>
#include <string>

namespace lbq {

// Base for all toolkit errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/dimension mismatch between operands.
class DimError : public Error {
 public:
  explicit DimError(const std::string& msg) : Error(msg) {}
};

// Bad scheme, granularity pairing, group size, or option combination.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Malformed or truncated container file.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

// Value outside the representable range (e.g. nibble packing input).
class RangeError : public Error {
 public:
  explicit RangeError(const std::string& msg) : Error(msg) {}
};

// Invalid caller-supplied data (empty batch set, negative absmax, ...).
class InputError : public Error {
 public:
  explicit InputError(const std::string& msg) : Error(msg) {}
};

}  // namespace lbq

#endif  // LBQ_ERROR_HPP
