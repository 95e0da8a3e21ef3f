#pragma once

#include <stdexcept>
#include <string>

namespace pfnf {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// Operation invoked in the wrong lifecycle state (e.g. backward before forward).
class StateError : public Error {
 public:
  using Error::Error;
};

// A caller-side contract violation: bad config, bad arguments.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A metric or statistic that has no defined value for the given input.
class UndefinedScoreError : public Error {
 public:
  using Error::Error;
};

// The prior failed to produce a usable task after its retry budget.
class DegenerateTaskError : public Error {
 public:
  using Error::Error;
};

}  // namespace pfnf
