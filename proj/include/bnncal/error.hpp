#pragma once

#include <stdexcept>
#include <string>

namespace bnncal {

/// Precondition broken by the caller (shape mismatch, empty input, out-of-range value).
class ContractViolation : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Numerical failure: singular covariance, diverged optimizer, undefined statistic.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Fit that cannot proceed because the data carry no information (e.g. one class).
class DegenerateFitError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input file or configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t line)
        : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line_(line) {}

    [[nodiscard]] std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

inline void require(bool condition, const char* message)
{
    if (!condition) throw ContractViolation(message);
}

inline void require(bool condition, const std::string& message)
{
    if (!condition) throw ContractViolation(message);
}

}  // namespace bnncal
