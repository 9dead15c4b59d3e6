#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ctok {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree. Carries the id the offending node has (or would have had).
class ShapeError : public Error {
 public:
    ShapeError(std::size_t node, const std::string& what)
        : Error("node " + std::to_string(node) + ": " + what), node_(node) {}

    std::size_t node() const noexcept { return node_; }

 private:
    std::size_t node_;
};

/// Malformed or inconsistent input data (files, records, configs).
class ValidationError : public Error {
 public:
    using Error::Error;
};

/// Non-finite values or other numerical breakdowns.
class NumericalError : public Error {
 public:
    using Error::Error;
};

/// Bad invocation: invalid flags, violated preconditions on user-supplied parameters.
class UsageError : public Error {
 public:
    using Error::Error;
};

}  // namespace ctok
