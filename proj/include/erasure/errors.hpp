#pragma once

#include <stdexcept>
#include <string>

namespace erasure {

/// Base of every error raised by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid user configuration or inputs (exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A caller broke an operation's precondition (shape, ordering, double application).
class ContractError : public Error {
public:
    using Error::Error;
};

/// A backend broke the diffusion-stack contract or failed to load.
class BackendError : public Error {
public:
    using Error::Error;
};

/// Failure during training or evaluation (non-finite loss, pretrain gate not met, ...).
class RuntimeFailure : public Error {
public:
    using Error::Error;
};

}  // namespace erasure
