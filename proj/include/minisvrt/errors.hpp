#pragma once

#include <stdexcept>
#include <string>

namespace minisvrt {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid argument or precondition violation.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Tensor/model shape incompatibility.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed file content (PGM header, manifest, checkpoint).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Filesystem failure.
class IoError : public Error {
 public:
  using Error::Error;
};

// Sample/contour generation exhausted its rejection budget.
class GenerationError : public Error {
 public:
  using Error::Error;
};

// A record could not be verified at all (unreadable, corrupt), as opposed
// to a record that verifies to false.
class VerificationError : public Error {
 public:
  using Error::Error;
};

// Operation called in the wrong state (backward twice, step without grads).
class StateError : public Error {
 public:
  using Error::Error;
};

// Invalid model or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite value detected in checked mode, or training divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace minisvrt
