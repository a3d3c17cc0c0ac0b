#pragma once

#include <stdexcept>
#include <string>

namespace ddxt {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user-supplied configuration or arguments (CLI exit code 1).
struct ParamError : Error {
    using Error::Error;
};

// Malformed or inconsistent input data (CLI exit code 2).
struct DataError : Error {
    using Error::Error;
};

// Internal numeric failures: degenerate reductions, non-finite losses (CLI exit code 3).
struct NumericError : Error {
    using Error::Error;
};

// Tensor shape disagreements.
struct DimensionError : NumericError {
    using NumericError::NumericError;
};

// Out-of-range ids or labels.
struct IndexError : NumericError {
    using NumericError::NumericError;
};

// File format / filesystem failures.
struct IoError : Error {
    using Error::Error;
};

}  // namespace ddxt
