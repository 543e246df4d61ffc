// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace stasc {

/// Base of every error raised by the library. The CLI maps subclasses to
/// stable exit codes (see cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid run configuration, variant code, dataset row or reward spec.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed prompt template or missing placeholder.
class TemplateError : public Error {
 public:
  using Error::Error;
};

/// Persisted run state or trajectory log is inconsistent.
class StateIntegrityError : public Error {
 public:
  using Error::Error;
};

/// Train/test overlap and similar data validation failures.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A backend call failed after all retries.
class BackendError : public Error {
 public:
  using Error::Error;
};

/// Retryable transport failure (connection refused, 429, 5xx).
class TransportError : public BackendError {
 public:
  TransportError(const std::string& what, int status = 0)
      : BackendError(what), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

/// The backend does not know the requested model id. Fatal.
class UnknownModelError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// The trainer reported failure for a job.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// The run stopped on an empty fine-tuning set under the halt policy. The
/// persisted state is resumable.
class RunHalted : public Error {
 public:
  using Error::Error;
};

}  // namespace stasc
