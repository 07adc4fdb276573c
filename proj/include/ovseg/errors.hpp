#pragma once

#include <stdexcept>
#include <string>

namespace ovseg {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape / dimension contract violations.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf surfaced from a forward op, or divergence during training.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Config file problems (bad syntax, unknown key, bad value).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Filesystem-level failures (cannot open/read/write).
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Binary container problems, each condition distinct.
class BadMagicError : public Error {
public:
    explicit BadMagicError(const std::string& msg) : Error(msg) {}
};

class BadVersionError : public Error {
public:
    explicit BadVersionError(const std::string& msg) : Error(msg) {}
};

class TruncatedFileError : public Error {
public:
    explicit TruncatedFileError(const std::string& msg) : Error(msg) {}
};

class ChecksumError : public Error {
public:
    explicit ChecksumError(const std::string& msg) : Error(msg) {}
};

class EmptyInputError : public Error {
public:
    explicit EmptyInputError(const std::string& msg) : Error(msg) {}
};

}  // namespace ovseg
