#pragma once

#include <stdexcept>
#include <string>

namespace alct {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed arguments to a pure function (bad lengths, out-of-range values).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// A configuration value violates its documented invariant.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A file on disk does not match the expected container layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace alct
