#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace fedade {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Precondition violated by a caller-supplied argument (size, range).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Input has no direction (zero norm) where one is required.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class IllConditionedError : public Error {
 public:
  IllConditionedError(const std::string& what, double smallest_singular_estimate)
      : Error(what), smallest_singular_estimate_(smallest_singular_estimate) {}

  double smallest_singular_estimate() const noexcept { return smallest_singular_estimate_; }

 private:
  double smallest_singular_estimate_;
};

/// A labeled set does not contain every class.
class CoverageError : public Error {
 public:
  CoverageError(const std::string& what, std::size_t missing_class)
      : Error(what), missing_class_(missing_class) {}

  std::size_t missing_class() const noexcept { return missing_class_; }

 private:
  std::size_t missing_class_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(std::vector<std::string> violations)
      : Error(join(violations)), violations_(std::move(violations)) {}

  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out = "invalid config:";
    for (const auto& s : v) out += "\n  - " + s;
    return out;
  }
  std::vector<std::string> violations_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed JSON; line and column are 1-based.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line, std::size_t column)
      : Error(what), line_(line), column_(column) {}
  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

}  // namespace fedade
