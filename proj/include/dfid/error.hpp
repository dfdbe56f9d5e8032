#pragma once
// Error types shared by every stage. Each category maps onto one CLI exit code.

#include <stdexcept>
#include <string>

namespace dfid {

enum class ExitCode : int {
    ok = 0,
    config = 2,
    numeric = 3,
    io = 4,
};

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual ExitCode exit_code() const noexcept = 0;
};

// Rejected input: bad dimensions, out-of-range indices, malformed configuration.
class ConfigError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::config; }
};

// Non-finite values, divergence, unmet training floors.
class NumericError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::numeric; }
};

class IoError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::io; }
};

// Prefixes the message of a propagated error with the stage that raised it,
// keeping the original category.
template <typename E>
[[noreturn]] void rethrow_in_stage(const std::string& stage, const E& e) {
    throw E(stage + ": " + e.what());
}

}  // namespace dfid
