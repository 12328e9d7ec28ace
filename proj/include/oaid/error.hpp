#pragma once

#include <stdexcept>
#include <string>

namespace oaid {

// Base for every failure raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Malformed input, violated precondition or invalid configuration.
class ValidationError : public Error {
public:
  using Error::Error;
};

// Mismatched tensor shapes or layer wiring.
class ShapeError : public ValidationError {
public:
  using ValidationError::ValidationError;
};

// NaN / Inf encountered in a numeric pipeline.
class NumericError : public Error {
public:
  using Error::Error;
};

// Filesystem and codec failures.
class IoError : public Error {
public:
  using Error::Error;
};

}  // namespace oaid
