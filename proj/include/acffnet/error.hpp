#pragma once

#include <stdexcept>
#include <string>

namespace acff {

// Base of everything the library throws on a broken contract.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or layer shapes do not compose.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value (channels, rates, ratios, etc).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Filesystem or decoding failure.
class IoError : public Error {
 public:
  using Error::Error;
};

// Weight file failed validation (magic, version, CRC, layout).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace acff
