#pragma once

#include <stdexcept>
#include <string>

namespace acflow {

// Base of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes that do not conform for an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Input outside an operation's mathematical domain (log of a non-positive
// value, division by zero, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Singular or ill-conditioned linear algebra inside a transform.
// transform_index is -1 until the owning stack tags it.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what, int transform_index = -1)
      : Error(transform_index < 0
                  ? what
                  : "transform " + std::to_string(transform_index) + ": " + what),
        detail_(what),
        transform_index_(transform_index) {}

  int transform_index() const noexcept { return transform_index_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string detail_;
  int transform_index_;
};

// Malformed text input: CSV cells, descriptors, config files.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Corrupt, truncated or version-mismatched checkpoint.
class LoadError : public Error {
 public:
  using Error::Error;
};

// Training could not make progress (repeated non-finite loss).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace acflow
