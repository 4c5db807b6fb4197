#ifndef ARBOR_ERRORS_HPP_
#define ARBOR_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace arbor {

// Bad or inconsistent input data (CSV contents, undersized splits, ...).
// CLI maps this to exit code 3.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// A caller broke an operation's precondition. Also exit code 3.
class ContractViolation : public std::logic_error {
 public:
  explicit ContractViolation(const std::string& msg) : std::logic_error(msg) {}
};

// File system / serialization failure. Exit code 3.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf detected where the numeric contract forbids it. Exit code 4.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace arbor

#endif  // ARBOR_ERRORS_HPP_
