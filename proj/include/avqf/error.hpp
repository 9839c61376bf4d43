#pragma once

#include <stdexcept>
#include <string>

namespace avqf {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape, rank, or axis mismatch between tensors.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid argument value: bad counts, ranges, steps, pixel ranges.
struct ValueError : Error {
  using Error::Error;
};

// Bad or internally inconsistent configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Sequence longer than a position table allows.
struct CapacityError : Error {
  using Error::Error;
};

// Filesystem-level failure (missing file, unwritable directory).
struct IoError : Error {
  using Error::Error;
};

// Malformed binary container (WAV, AVVF, AVQF).
struct FormatError : Error {
  using Error::Error;
};

// Malformed manifest line; message carries the line number.
struct ParseError : Error {
  using Error::Error;
};

// Well-formed input that violates dataset schema rules.
struct SchemaError : Error {
  using Error::Error;
};

// Unusable dataset (empty, or wrong record kind for the stage).
struct DatasetError : Error {
  using Error::Error;
};

// Loss mask selects no positions.
struct DegenerateLossError : Error {
  using Error::Error;
};

// Non-finite loss during training.
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace avqf
