#pragma once

#include <stdexcept>
#include <string>

namespace soft {

/// Root of every error the library raises on its own behalf. Precondition
/// violations on pure functions use std::invalid_argument / std::out_of_range.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration or malformed input data (CLI exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A run-directory artifact is missing or unreadable. The message names the file.
class ArtifactError : public Error {
public:
    ArtifactError(std::string path, const std::string& what)
        : Error(path + ": " + what), path_(std::move(path)) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

/// Any failure reported by, or while talking to, a model backend (exit code 4).
class BackendError : public Error {
public:
    using Error::Error;
};

/// The backend could not be reached, even after retries.
class TransportError : public BackendError {
public:
    using BackendError::BackendError;
};

/// The backend answered with something that violates the wire contract.
class ProtocolError : public BackendError {
public:
    using BackendError::BackendError;
};

/// The backend is reachable but cannot serve the requested kind of query.
class CapabilityError : public BackendError {
public:
    using BackendError::BackendError;
};

/// A remote fine-tune job reached status=failed, or polling timed out.
class JobFailedError : public BackendError {
public:
    using BackendError::BackendError;
};

/// A generation request failed; carries the prompt it was issued for.
class GenerationError : public BackendError {
public:
    GenerationError(std::string prompt_id, const std::string& what)
        : BackendError("prompt '" + prompt_id + "': " + what), prompt_id_(std::move(prompt_id)) {}
    const std::string& prompt_id() const noexcept { return prompt_id_; }

private:
    std::string prompt_id_;
};

/// Raised when an interrupt was requested; in-flight state has been flushed.
class Interrupted : public Error {
public:
    Interrupted() : Error("interrupted") {}
};

}  // namespace soft
