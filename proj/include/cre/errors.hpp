#pragma once

#include <stdexcept>
#include <string>

namespace cre {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree at an op boundary.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An index (class id, token id, target) is out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A feature row had (numerically) zero norm.
class DegenerateFeatureError : public Error {
 public:
  using Error::Error;
};

/// A tape was replayed a second time.
class ReuseError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf encountered where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

/// Image dimensions incompatible with the patch grid.
class GeometryError : public Error {
 public:
  using Error::Error;
};

/// Binary file has the wrong magic, version, size or tensor layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Malformed text input (manifest line, config document).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Well-formed input that fails a semantic check (duplicate path, bad config value).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// An image file could not be decoded. Recoverable per image.
class DecodeError : public Error {
 public:
  using Error::Error;
};

}  // namespace cre
