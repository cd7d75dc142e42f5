#pragma once

#include <stdexcept>
#include <string>

namespace vlm3d {

// Error taxonomy. All map to CLI exit code 2; usage errors (exit 1) are
// handled by the argument parser before any of these can be thrown.

struct invalid_input_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint archive is malformed: missing/extra tensors, bad shapes.
struct manifest_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct tokenizer_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace vlm3d
