#pragma once

#include <stdexcept>
#include <string>

namespace memaudit {

// Shape or axis disagreement between tensors (both shapes named in the message).
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Malformed external bytes: IDX streams, CIFAR records, checkpoint files.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API misuse: wrong mode, exhausted tape, invalid request.
struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

// Unknown example or checkpoint id.
struct LookupError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Manifest or configuration schema violation.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Filesystem failure.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace memaudit
