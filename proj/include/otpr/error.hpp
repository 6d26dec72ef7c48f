#pragma once

#include <stdexcept>
#include <string>

namespace otpr {

// Base of every error the library throws. The CLI maps subclasses to exit
// codes (config -> 2, numerical -> 3, io -> 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public NumericalError {
 public:
  SamplingError(const std::string& what, int step)
      : NumericalError(what + " (step " + std::to_string(step) + ")"),
        step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace otpr
