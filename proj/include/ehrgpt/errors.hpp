#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ehrgpt {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid generator, model, or run configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed input file. Carries the 1-based line number when known.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Data that is well-formed but unusable (empty corpus, empty history, ...).
class DataError : public Error {
public:
    using Error::Error;
};

/// Token stream that violates the timeline grammar.
class GrammarError : public Error {
public:
    GrammarError(const std::string& what, std::size_t position)
        : Error("position " + std::to_string(position) + ": " + what), position_(position) {}

    std::size_t position() const noexcept { return position_; }

private:
    std::size_t position_;
};

/// Non-finite loss or gradient.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace ehrgpt
