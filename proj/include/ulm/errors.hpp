#pragma once

#include <stdexcept>
#include <string>

namespace ulm {

/// Bad inputs from outside the process: missing files, schema violations,
/// out-of-range arguments. Maps to CLI exit code 3.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite values or other numeric breakdown. Maps to CLI exit code 4.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ulm
