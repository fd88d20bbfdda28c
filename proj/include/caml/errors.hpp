#pragma once

#include <stdexcept>
#include <string>

namespace caml {

// Base class for all library errors. Subclasses map onto the CLI exit
// code contract: usage/config -> 2, data -> 3, numeric failure -> 4.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand shapes do not conform (message names both shapes).
class ShapeError : public Error {
public:
    using Error::Error;
};

// A forward op produced NaN/Inf, or a computation diverged.
class NumericError : public Error {
public:
    using Error::Error;
};

// An operation was called outside its contract (bad argument, wrong state).
class UsageError : public Error {
public:
    using Error::Error;
};

// Configuration file / key problems.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Corpus or cache content problems.
class DataError : public Error {
public:
    using Error::Error;
};

} // namespace caml
