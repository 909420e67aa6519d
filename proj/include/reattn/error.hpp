#pragma once

#include <stdexcept>
#include <string>

namespace reattn {

// Every failure raised by the library derives from Error so callers (the CLI in
// particular) can map it to a diagnostic and a nonzero exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes that cannot be combined.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A scalar argument out of its admissible range (temperature, drop rate, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// A model or experiment description that violates one of its invariants.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Misuse of an API contract (non-scalar loss, replayed tape, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf detected in a checked tensor.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Bad labels or malformed dataset records.
class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed experiment/config JSON.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Checkpoint manifest inconsistent with its tensor payload.
class ManifestError : public Error {
 public:
  using Error::Error;
};

// A gradient check whose function is not deterministic.
class CheckInvalidError : public Error {
 public:
  using Error::Error;
};

}  // namespace reattn
