#pragma once

#include <stdexcept>
#include <string>

namespace evtraffic {

/// Input data or configuration violates a documented contract.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape mismatch between tensor operands.
class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// A computation left its numerical domain (NaN loss, alpha <= 1, ...).
class NumericalError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace evtraffic
