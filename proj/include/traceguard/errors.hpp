// Exception taxonomy shared by every module in this library.
#pragma once

#include <stdexcept>
#include <string>

namespace traceguard {

// Base class for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration: unknown domain or metric id, bad endpoint config,
// malformed registry or experiment files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A caller violated an operation precondition (empty inputs, bad ranges).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Malformed or schema-violating serialized records.
class ParseError : public Error {
 public:
  using Error::Error;
};

// A judge reply that does not follow the yes/no answer grammar. Keeps the
// raw reply so callers can log or surface it.
class VerdictParseError : public Error {
 public:
  VerdictParseError(const std::string& msg, std::string raw_response)
      : Error(msg), raw_response_(std::move(raw_response)) {}
  const std::string& raw_response() const { return raw_response_; }

 private:
  std::string raw_response_;
};

// Network-level failure talking to a remote judge or embedding endpoint.
class TransportError : public Error {
 public:
  using Error::Error;
};

// Remote judge still failing after the configured retries.
class JudgeUnavailableError : public TransportError {
 public:
  using TransportError::TransportError;
};

// Remote judge did not answer within the configured timeout.
class JudgeTimeoutError : public TransportError {
 public:
  using TransportError::TransportError;
};

// The oracle judge was handed a prompt it cannot ground in its labels.
class OracleMisuseError : public Error {
 public:
  using Error::Error;
};

// A rate was requested over an empty class (no backdoored or no benign
// traces), or a ROC was requested without both classes.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

// The simulator could not satisfy a generation request.
class GenerationError : public Error {
 public:
  using Error::Error;
};

}  // namespace traceguard
