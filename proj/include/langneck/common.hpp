#pragma once

#include <stdexcept>
#include <string>

namespace langneck {

// Shape-incompatible operands or a non-scalar differentiation root.
struct DimError : std::runtime_error {
    explicit DimError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

// Out-of-range label or token id.
struct IndexError : std::runtime_error {
    explicit IndexError(const std::string& msg) : std::runtime_error("index error: " + msg) {}
};

// Invalid argument value (severity out of range, n too large, ...).
struct ArgumentError : std::runtime_error {
    explicit ArgumentError(const std::string& msg) : std::runtime_error("argument error: " + msg) {}
};

// NaN/Inf produced by a primitive, or training divergence.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

// Malformed file: bad magic, version mismatch, truncation.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error("format error: " + msg) {}
};

// Mismatched artifacts (vocabulary hash, model config).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

}  // namespace langneck
