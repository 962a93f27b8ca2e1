#pragma once

#include <stdexcept>
#include <string>

namespace nb {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible shapes.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Value outside a function's domain (log of a non-positive number, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Bad argument that is not a shape problem (empty batch, non-scalar loss, ...).
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// A prior entry sits on the boundary {0, 1} where the parameterization is undefined.
class DegeneratePriorError : public Error {
public:
    using Error::Error;
};

/// Malformed file content.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Inconsistent training or run configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Synthetic data generation failed a post-condition.
class GenerationError : public Error {
public:
    using Error::Error;
};

}  // namespace nb
