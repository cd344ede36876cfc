#pragma once

#include <stdexcept>
#include <string>

namespace foresight {

// Invalid configuration or arguments supplied by the caller. The CLI maps
// this to exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Input outside the mathematical domain of an operation (wrong block kind,
// non-causal chunk pair, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Structural precondition violated (shape mismatch, mixed-kind grid, ...).
class PreconditionError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Failure during a computation that was correctly configured (non-finite
// loss, corrupted file). Exit code 3 in the CLI.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace foresight
