#pragma once

#include <stdexcept>
#include <string>

namespace geomattn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or ranks.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, invalid domains (log of non-positive), broken gradients.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the differentiation graph (double backward, non-scalar root).
class GraphError : public Error {
 public:
  using Error::Error;
};

/// Missing or malformed files and datasets.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace geomattn
