#pragma once

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <string>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "selfbias/errors.hpp"

namespace selfbias {

struct RetryPolicy {
  std::size_t max_attempts = 4;
  std::chrono::milliseconds initial_backoff{250};
  double backoff_multiplier = 2.0;
  std::chrono::milliseconds max_backoff{4000};
};

/// Where and how to talk to an OpenAI-compatible endpoint. The credential is
/// read from the named environment variable at request time; when unset, the
/// request goes out without an Authorization header (local mock servers).
struct EndpointConfig {
  std::string base_url;
  std::string api_key_env = "OPENAI_API_KEY";
  std::chrono::seconds timeout{60};
  RetryPolicy retry;
};

namespace detail {

inline bool transient_status(int status) {
  return status == 408 || status == 429 || status >= 500;
}

/// POSTs JSON and returns the parsed body. Connection failures and
/// transient statuses are retried under the policy with exponential
/// backoff; 401/403 raise AuthError immediately; other client errors and
/// retry exhaustion raise TransportError.
inline nlohmann::json post_json(const EndpointConfig& endpoint, const std::string& path,
                                const nlohmann::json& body) {
  if (endpoint.base_url.empty()) throw ConfigError("endpoint base URL is not set");
  const std::string payload = body.dump();
  httplib::Headers headers;
  if (const char* key = std::getenv(endpoint.api_key_env.c_str()); key && *key)
    headers.emplace("Authorization", std::string("Bearer ") + key);

  auto backoff = endpoint.retry.initial_backoff;
  std::string last_failure = "no attempts made";
  const std::size_t attempts = std::max<std::size_t>(endpoint.retry.max_attempts, 1);
  for (std::size_t attempt = 0; attempt < attempts; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(backoff);
      backoff = std::min(std::chrono::milliseconds(static_cast<long>(
                             static_cast<double>(backoff.count()) * endpoint.retry.backoff_multiplier)),
                         endpoint.retry.max_backoff);
    }
    httplib::Client client(endpoint.base_url);
    client.set_connection_timeout(endpoint.timeout);
    client.set_read_timeout(endpoint.timeout);
    httplib::Result result = client.Post(path, headers, payload, "application/json");
    if (!result) {
      last_failure = "connection failure (" + httplib::to_string(result.error()) + ")";
      continue;
    }
    if (result->status == 401 || result->status == 403)
      throw AuthError("endpoint rejected credentials (HTTP " + std::to_string(result->status) +
                      "); set " + endpoint.api_key_env);
    if (detail::transient_status(result->status)) {
      last_failure = "HTTP " + std::to_string(result->status);
      continue;
    }
    if (result->status != 200)
      throw TransportError("endpoint returned HTTP " + std::to_string(result->status) + " for " +
                           path);
    try {
      return nlohmann::json::parse(result->body);
    } catch (const nlohmann::json::exception& e) {
      throw TransportError(std::string("endpoint returned unparseable JSON: ") + e.what());
    }
  }
  throw TransportError("retries exhausted for " + path + "; last failure: " + last_failure);
}

}  // namespace detail

}  // namespace selfbias
