#pragma once

#include <stdexcept>
#include <string>

namespace ncalab {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input text (dataset lines, checkpoints, configs).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// A domain invariant was violated by caller-supplied data.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Exhaustive enumeration would exceed the configured cap.
class EnumerationCapError : public Error {
 public:
  using Error::Error;
};

/// A training run aborted; `step()` is the step at which it happened.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long step) : Error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace ncalab
