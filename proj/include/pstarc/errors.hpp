#pragma once

#include <stdexcept>
#include <string>

namespace pstarc {

// Error taxonomy used across the library. Every throw site goes through one
// of these so the CLI can map failures to machine-readable kinds.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

// Operand shapes do not compose.
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& message) : Error("dimension", message) {}
};

// A value that must be finite is NaN or Inf.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& message) : Error("numeric", message) {}
};

// An API precondition was violated by the caller.
class ContractError : public Error {
public:
    explicit ContractError(const std::string& message) : Error("contract", message) {}
};

// Invalid generation / experiment configuration.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& message) : Error("config", message) {}
};

// Malformed input file.
class ParseError : public Error {
public:
    explicit ParseError(const std::string& message) : Error("parse", message) {}
};

// A feature-bank class partition is too small to serve K positives.
class BankDeficiencyError : public Error {
public:
    explicit BankDeficiencyError(const std::string& message) : Error("bank_deficiency", message) {}
};

}  // namespace pstarc
