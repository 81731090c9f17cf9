#pragma once

#include <stdexcept>
#include <string>

namespace treednn {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameter or configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed textual input (CSV rows, spec text, config files).
class ParseError : public Error {
 public:
  using Error::Error;
};

// Class index outside [0, K).
class LabelError : public Error {
 public:
  using Error::Error;
};

// Unknown task id or section name.
class LookupError : public Error {
 public:
  using Error::Error;
};

// Caller violated an operation contract (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Batch statistics undefined (BatchNorm in train mode with N = 1).
class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by a forward or backward pass.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Trunk and branch shapes do not compose.
class ConstructionError : public Error {
 public:
  using Error::Error;
};

// Bundle container is structurally invalid (magic, version, framing).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Section CRC does not match its bytes.
class ChecksumError : public Error {
 public:
  using Error::Error;
};

// Operation called in the wrong runtime state.
class StateError : public Error {
 public:
  using Error::Error;
};

// Filesystem failure.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace treednn
