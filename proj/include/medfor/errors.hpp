#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace medfor {

// Base class for everything this library throws on bad input or state.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed text input (manifest line, config entry). Carries the 1-based line.
class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

// Well-formed input that violates a contract (duplicate path, label out of range, ...).
class ValidationError : public Error {
public:
    using Error::Error;
};

// Inconsistent model / adapter / run configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Shape or dimension mismatch between tensors, banks and backbones.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Binary container problems: bad magic, version, truncation, missing tensor.
class FormatError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace medfor
