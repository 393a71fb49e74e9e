#pragma once

#include <stdexcept>
#include <string>

namespace mlbss {

// Violated precondition or structurally inconsistent arguments.
class ArgumentError : public std::invalid_argument {
 public:
  explicit ArgumentError(const std::string& what) : std::invalid_argument(what) {}
};

// Numerical breakdown (singular systems, non-finite iterates) that survived
// every retry the caller allowed. Carries per-attempt diagnostics in what().
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mlbss
