#pragma once

#include <stdexcept>
#include <string>

namespace elt {

// Error taxonomy shared by the whole library. The CLI maps ConfigError to
// exit status 2 and every other failure to status 1.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor extents disagree (inner dimensions, broadcast suffix, ...).
struct ShapeError : Error {
    using Error::Error;
};

// Invalid configuration value; message names the offending field.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed input data (token id out of range, wrong patch count, ...).
struct DataError : Error {
    using Error::Error;
};

// API misuse: backward on a non-scalar, expert index out of range, ...
struct UsageError : Error {
    using Error::Error;
};

// Corrupt or truncated on-disk artifact.
struct FormatError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace elt
