#pragma once

#include <stdexcept>
#include <string>

namespace selfbias {

/// Bad or inconsistent run configuration (paths, formats, missing settings).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Unreadable input, zero valid records, duplicate record ids.
class CorpusError : public std::runtime_error {
 public:
  explicit CorpusError(const std::string& what) : std::runtime_error(what) {}
};

/// HTTP request failed permanently or retries were exhausted.
class TransportError : public std::runtime_error {
 public:
  explicit TransportError(const std::string& what) : std::runtime_error(what) {}
};

/// Credential rejected by the endpoint; never retried.
class AuthError : public TransportError {
 public:
  explicit AuthError(const std::string& what) : TransportError(what) {}
};

/// Endpoint cannot perform the requested kind of scoring.
class CapabilityError : public std::runtime_error {
 public:
  explicit CapabilityError(const std::string& what) : std::runtime_error(what) {}
};

/// Token/offset bookkeeping between prompt and response does not line up.
class AlignmentError : public std::runtime_error {
 public:
  explicit AlignmentError(const std::string& what) : std::runtime_error(what) {}
};

/// A statistic is undefined on the given data (empty confusion row, empty group).
class AnalysisError : public std::runtime_error {
 public:
  explicit AnalysisError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace selfbias
