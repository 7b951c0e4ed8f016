#pragma once

#include <stdexcept>
#include <string>

namespace peel4d {

// Invalid configuration or contract violation detected at construction.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed or truncated serialized data.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dataset on disk is missing files or violates its invariants.
struct DatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Space carving removed every voxel.
struct InitializationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite loss or tensor during training.
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace peel4d
