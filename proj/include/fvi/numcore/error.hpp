#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fvi {

/// Shape or extent disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argument outside the mathematical domain of an operation (log of a
/// non-positive value, non-positive scale, input outside a prior's support).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Numerical breakdown: indefinite matrices, non-convergence, NaN objectives.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what, double last_jitter = 0.0,
                          std::size_t iteration = 0)
      : std::runtime_error(what), last_jitter_(last_jitter), iteration_(iteration) {}

  double last_jitter() const noexcept { return last_jitter_; }
  std::size_t iteration() const noexcept { return iteration_; }

 private:
  double last_jitter_;
  std::size_t iteration_;
};

/// Misuse of a stateful object, e.g. a second backward sweep on one tape.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Violated precondition that is not a shape or domain problem.
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed input file; carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Well-formed input whose content does not match the expected schema.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fvi
