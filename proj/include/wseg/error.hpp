#pragma once

#include <stdexcept>
#include <string>

namespace wseg {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid model/op configuration: bad shapes, bad hyperparameters.
struct ConfigError : Error {
  using Error::Error;
};

// Invalid runtime input: out-of-range labels, missing samples, shape mismatch.
struct InputError : Error {
  using Error::Error;
};

// File format or filesystem failure.
struct IoError : Error {
  using Error::Error;
};

// API misuse, e.g. backward from a non-scalar value.
struct UsageError : Error {
  using Error::Error;
};

// Degenerate numeric input (e.g. a constant map fed to a threshold
// selector). Callers may catch this and substitute a defined fallback.
struct DegenerateInputError : InputError {
  using InputError::InputError;
};

}  // namespace wseg
