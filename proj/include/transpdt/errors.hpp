#pragma once

#include <stdexcept>
#include <string>

namespace transpdt {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shapes that do not line up for an operation.
struct DimensionError : Error {
  using Error::Error;
};

// NaN or Inf produced or consumed.
struct NumericError : Error {
  using Error::Error;
};

// Caller broke a precondition of an operation.
struct ContractError : Error {
  using Error::Error;
};

// Input with nothing valid to work on (all positions masked, empty sets).
struct DegenerateInputError : Error {
  using Error::Error;
};

struct ParseError : Error {
  using Error::Error;
};

struct ValidationError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct MetricError : Error {
  using Error::Error;
};

}  // namespace transpdt
