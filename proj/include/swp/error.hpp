#pragma once

#include <stdexcept>
#include <string>

namespace swp {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not chain or do not match an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed on-disk data: checkpoints, dataset files.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Bad user configuration (unknown keys, out-of-range values).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace swp
