// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace oppu {

/// Base class for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A caller violated a documented precondition.
struct ArgumentError : Error {
    using Error::Error;
};

/// Malformed external input (dataset lines, config files, grid files).
struct ParseError : Error {
    using Error::Error;
};

/// Invalid configuration detected before any compute starts.
struct ConfigError : Error {
    using Error::Error;
};

/// An operation was called in the wrong order (e.g. backward without forward).
struct StateError : Error {
    using Error::Error;
};

/// Adapter and base model do not belong together (digest mismatch).
struct CompatibilityError : Error {
    using Error::Error;
};

/// Stored bytes fail their checksum or structural validation.
struct IntegrityError : Error {
    using Error::Error;
};

/// Checkpoint container: wrong magic bytes.
struct FormatError : IntegrityError {
    using IntegrityError::IntegrityError;
};

/// Checkpoint container: unsupported format version.
struct VersionError : IntegrityError {
    using IntegrityError::IntegrityError;
};

/// Checkpoint container: file ends before the declared payload does.
struct TruncatedError : IntegrityError {
    using IntegrityError::IntegrityError;
};

/// Checkpoint container: CRC mismatch.
struct ChecksumError : IntegrityError {
    using IntegrityError::IntegrityError;
};

/// Requested entry does not exist.
struct NotFoundError : Error {
    using Error::Error;
};

/// An entry already exists and overwrite was not requested.
struct ConflictError : Error {
    using Error::Error;
};

/// Operation is defined only for a different adapter method.
struct UnsupportedError : Error {
    using Error::Error;
};

}  // namespace oppu
