#pragma once

#include <stdexcept>
#include <string>

namespace gvsl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents or grids that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf values, non-positive scales, losses that blew up.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated files, bad magic, checksum failures.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures (missing files, unwritable paths).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint does not match the architecture it is loaded into.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace gvsl
