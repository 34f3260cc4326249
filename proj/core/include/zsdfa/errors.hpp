#pragma once

#include <stdexcept>
#include <string>

namespace zsdfa {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Tensor shape / dimension mismatch.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A documented API precondition was violated by the caller.
class ContractError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration value (CLI exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed input data (bad parsing label, out-of-vocab token, ...).
class DataError : public Error {
public:
    using Error::Error;
};

/// Filesystem / serialization failure (CLI exit code 3).
class IoError : public Error {
public:
    using Error::Error;
};

/// Numeric failure: NaN/Inf where finite values are required (CLI exit code 4).
class NumericError : public Error {
public:
    using Error::Error;
};

/// Incompatible artifacts, e.g. checkpoint vs dataset geometry (CLI exit code 5).
class CompatError : public Error {
public:
    using Error::Error;
};

} // namespace zsdfa
