#pragma once

#include <stdexcept>
#include <string>

namespace poredit {

// Bad arguments, malformed files, invalid configurations. The CLI maps these
// to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Failures discovered while computing (divergence, non-convergence,
// non-percolating geometry, violated internal coverage). Exit code 2.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace poredit
