#pragma once

#include <stdexcept>
#include <string>

namespace gridpilot {

/// Root of every error the library throws. `exit_code()` is what the CLI
/// returns when the error escapes a subcommand.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
    virtual int exit_code() const noexcept { return 1; }
};

// Input files that do not match the documented schemas.
class SchemaError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

class TopologyError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

class ReferenceError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 4; }
};

// Singular matrices, non-finite values, domain violations.
class NumericalError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 5; }
};

class DivergedError : public Error {
public:
    DivergedError(const std::string& what, double last_residual)
        : Error(what), last_residual_(last_residual) {}
    double last_residual() const noexcept { return last_residual_; }
    int exit_code() const noexcept override { return 6; }

private:
    double last_residual_;
};

class ShapeError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 7; }
};

// Misuse of an API: stale caches, mismatched checkpoints, bad arguments.
class UsageError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 8; }
};

class DatasetError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 9; }
};

class TrainingError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 10; }
};

class MismatchError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 11; }
};

} // namespace gridpilot
