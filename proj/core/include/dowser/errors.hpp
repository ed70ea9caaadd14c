#pragma once

#include <stdexcept>
#include <string>

namespace dowser {

// Bad user input: malformed config, out-of-range arguments, shape mismatches
// at API boundaries. CLI maps this to exit code 2.
class config_error : public std::runtime_error {
 public:
  explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

// Numerical failure: non-finite values, divergent training, undefined
// statistics. CLI maps this to exit code 3.
class numerical_error : public std::runtime_error {
 public:
  explicit numerical_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace dowser
