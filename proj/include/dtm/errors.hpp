#pragma once

#include <stdexcept>
#include <string>

namespace dtm {

// Non-finite inputs, empty rows and similar mathematical domain violations.
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// Caller passed an argument outside the documented contract.
struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Sequence longer than the model's positional capacity.
struct CapacityError : std::length_error {
  using std::length_error::length_error;
};

// A construction precondition does not hold (e.g. adversary gap too wide).
struct PreconditionError : std::logic_error {
  using std::logic_error::logic_error;
};

// Training produced a non-finite loss.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// An internal invariant that should be impossible to violate was violated.
struct InvariantViolation : std::logic_error {
  using std::logic_error::logic_error;
};

// Malformed checkpoint, plan or report file.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace dtm
