#pragma once

#include <stdexcept>
#include <string>

namespace vfa {

// Every failure raised by the library derives from Error. The CLI maps the
// concrete type onto its exit-code table.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor or volume shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A configuration value outside its documented domain (temperature <= 0,
// even window, bins < 2, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Malformed or out-of-domain data supplied by the caller (NaN coordinates,
// keypoints outside the image, extents not divisible by the pyramid factor).
class InputError : public Error {
 public:
  using Error::Error;
};

// API misuse: backward on a non-scalar, empty dataset, nothing to evaluate.
class UsageError : public Error {
 public:
  using Error::Error;
};

// File could not be opened.
class IoError : public Error {
 public:
  using Error::Error;
};

// File opened but its content violates the documented format.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Training diverged (non-finite loss).
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace vfa
