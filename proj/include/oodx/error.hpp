#pragma once

#include <stdexcept>
#include <string>

namespace oodx {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent configuration (shapes, hyperparameters, architecture).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Caller passed a value outside an operation's domain.
class InputError : public Error {
public:
    using Error::Error;
};

/// Operation invoked in the wrong order (e.g. backward with no recorded forward).
class StateError : public Error {
public:
    using Error::Error;
};

/// Training data cannot support the requested run (empty or starved class).
class DataError : public Error {
public:
    using Error::Error;
};

/// NaN or infinity appeared where a finite value is required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// On-disk file does not follow its documented layout.
class FormatError : public Error {
public:
    using Error::Error;
};

class CalibrationError : public Error {
public:
    using Error::Error;
};

/// AUC requested on a set that holds a single class.
class UndefinedAucError : public InputError {
public:
    using InputError::InputError;
};

/// Artifacts produced for different models or methods were mixed.
class FingerprintMismatchError : public InputError {
public:
    using InputError::InputError;
};

// Checkpoint loading failures, kept distinct so callers can react to each.
class LoadError : public Error {
public:
    using Error::Error;
};

class VersionMismatchError : public LoadError {
public:
    using LoadError::LoadError;
};

class ShapeMismatchError : public LoadError {
public:
    using LoadError::LoadError;
};

class TruncatedPayloadError : public LoadError {
public:
    using LoadError::LoadError;
};

}  // namespace oodx
