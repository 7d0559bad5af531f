#pragma once

#include <stdexcept>
#include <string>

namespace mmc {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor extents disagree with what an operation requires.
struct ShapeError : Error {
  using Error::Error;
};

// A non-shape argument is out of its valid range.
struct ValueError : Error {
  using Error::Error;
};

// A trainable parameter was stepped without a populated gradient.
struct MissingGradError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// On-disk data contradicts its own metadata (e.g. box != tight mask box).
struct IntegrityError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

}  // namespace mmc
