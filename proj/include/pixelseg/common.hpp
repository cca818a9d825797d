#pragma once

#include <stdexcept>
#include <string>

namespace pixelseg {

// Error taxonomy maps onto CLI exit codes: spec/config -> 2, I/O -> 3, numeric -> 4.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad network/solver specs, inconsistent geometry, invalid arguments.
struct SpecError : Error {
  using Error::Error;
};

// Shape/size violations detected while wiring or running a net.
struct SizeError : SpecError {
  using SpecError::SpecError;
};

// File and stream failures.
struct IoError : Error {
  using Error::Error;
};

// NaN/Inf or other numeric breakdown during computation.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace pixelseg
