#ifndef EMORL_ERRORS_HPP
#define EMORL_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace emorl {

/// Base of all library errors. kind() is a stable, machine-parsable class
/// name printed by the CLI.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    [[nodiscard]] virtual const char* kind() const noexcept { return "error"; }
};

class ConfigError : public Error {
public:
    using Error::Error;
    [[nodiscard]] const char* kind() const noexcept override { return "config_error"; }
};

class FormatError : public Error {
public:
    using Error::Error;
    [[nodiscard]] const char* kind() const noexcept override { return "format_error"; }
};

class TruncatedError : public FormatError {
public:
    using FormatError::FormatError;
    [[nodiscard]] const char* kind() const noexcept override { return "truncated_error"; }
};

class IoError : public Error {
public:
    using Error::Error;
    [[nodiscard]] const char* kind() const noexcept override { return "io_error"; }
};

class IndexError : public Error {
public:
    using Error::Error;
    [[nodiscard]] const char* kind() const noexcept override { return "index_error"; }
};

class ShapeError : public Error {
public:
    using Error::Error;
    [[nodiscard]] const char* kind() const noexcept override { return "shape_error"; }
};

class NumericError : public Error {
public:
    using Error::Error;
    [[nodiscard]] const char* kind() const noexcept override { return "numeric_error"; }
};

class MismatchError : public Error {
public:
    using Error::Error;
    [[nodiscard]] const char* kind() const noexcept override { return "config_mismatch"; }
};

}  // namespace emorl

#endif  // EMORL_ERRORS_HPP
