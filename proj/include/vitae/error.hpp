#ifndef VITAE_ERROR_HPP_
#define VITAE_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace vitae {

// Shape/dimension disagreements between tensors or layers.
struct DimError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid model/train/CLI configuration (bad field value, broken invariant).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed external files (IDX, checkpoint, PGM).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid data content (out-of-range label, empty dataset).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse (non-scalar backward root, missing gradient).
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace vitae

#endif
