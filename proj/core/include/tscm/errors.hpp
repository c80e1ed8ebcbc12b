#pragma once

#include <stdexcept>
#include <string>

namespace tscm {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid configuration, bad arguments, unusable paths.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(what) {}
};

/// Malformed or inconsistent on-disk data: bad magic, truncated payload,
/// integrity violations.
class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(what) {}
};

/// File format version the library does not understand.
class VersionError : public DataError {
public:
    explicit VersionError(const std::string& what) : DataError(what) {}
};

/// Numeric failures: shape mismatches during compute, non-finite values,
/// degenerate inputs, divergence.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(what) {}
};

/// Tensor shape disagreement; message names both shapes.
class DimensionError : public NumericError {
public:
    explicit DimensionError(const std::string& what) : NumericError(what) {}
};

}  // namespace tscm
