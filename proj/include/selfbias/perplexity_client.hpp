#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "selfbias/corpus.hpp"
#include "selfbias/errors.hpp"
#include "selfbias/perplexity.hpp"
#include "selfbias/prompt.hpp"
#include "selfbias/transport.hpp"

namespace selfbias {

/// Echo-mode completion scoring payload: every token of the submitted text
/// with its logprob (the very first token has none) and its byte offset.
struct EchoScore {
  std::vector<std::string> tokens;
  std::vector<std::optional<double>> token_logprobs;
  std::vector<std::size_t> text_offsets;
};

class ScoringClient {
 public:
  virtual ~ScoringClient() = default;
  virtual EchoScore score(const std::string& model, const std::string& text) = 0;
};

inline nlohmann::ordered_json build_scoring_request_body(const std::string& model,
                                                         const std::string& text) {
  return nlohmann::ordered_json{{"model", model}, {"prompt", text},   {"max_tokens", 0},
                                {"echo", true},   {"logprobs", 0}};
}

inline EchoScore parse_scoring_response(const nlohmann::json& body) {
  if (!body.contains("choices") || !body.at("choices").is_array() || body.at("choices").empty())
    throw TransportError("scoring response carries no choices");
  const nlohmann::json& choice = body.at("choices").at(0);
  if (!choice.contains("logprobs") || !choice.at("logprobs").is_object())
    throw CapabilityError("endpoint lacks echo scoring with logprobs; "
                          "ingest a precomputed NLL file instead");
  const nlohmann::json& lp = choice.at("logprobs");
  EchoScore echo;
  try {
    for (const nlohmann::json& t : lp.at("tokens")) echo.tokens.push_back(t.get<std::string>());
    for (const nlohmann::json& v : lp.at("token_logprobs")) {
      if (v.is_null())
        echo.token_logprobs.push_back(std::nullopt);
      else
        echo.token_logprobs.push_back(v.get<double>());
    }
    for (const nlohmann::json& o : lp.at("text_offset"))
      echo.text_offsets.push_back(o.get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw TransportError(std::string("malformed echo-scoring payload: ") + e.what());
  }
  if (echo.tokens.size() != echo.token_logprobs.size() ||
      echo.tokens.size() != echo.text_offsets.size())
    throw TransportError("echo-scoring arrays disagree in length");
  return echo;
}

class HttpScoringClient : public ScoringClient {
 public:
  explicit HttpScoringClient(EndpointConfig endpoint, std::string path = "/v1/completions")
      : endpoint_(std::move(endpoint)), path_(std::move(path)) {}

  EchoScore score(const std::string& model, const std::string& text) override {
    return parse_scoring_response(
        detail::post_json(endpoint_, path_, build_scoring_request_body(model, text)));
  }

 private:
  EndpointConfig endpoint_;
  std::string path_;
};

/// The conditioning prefix a response is scored against: the rendered
/// conversation, with the assistant cued up to continue.
inline std::string render_scoring_prompt(const DialogueRecord& record) {
  return detail::render_conversation(record.context) + "\nAssistant: ";
}

/// Scores one side's response conditioned on the record's context and
/// returns exactly the response tokens' logprobs. Requires a clean token
/// boundary at the end of the prompt; a straddling token would silently mix
/// prompt and response mass, so it is an alignment error instead.
inline std::vector<double> fetch_response_logprobs(const DialogueRecord& record, Side side,
                                                   ScoringClient& client,
                                                   const std::string& scorer_model) {
  const std::string prompt = render_scoring_prompt(record);
  const std::string& response = side == Side::a ? record.response_a : record.response_b;
  const EchoScore echo = client.score(scorer_model, prompt + response);

  std::size_t first = echo.tokens.size();
  for (std::size_t i = 0; i < echo.tokens.size(); ++i) {
    if (echo.text_offsets[i] >= prompt.size()) {
      first = i;
      break;
    }
  }
  if (first == echo.tokens.size())
    throw AlignmentError("record '" + record.record_id + "' side " + to_string(side) +
                         ": response produced no tokens");
  if (echo.text_offsets[first] != prompt.size())
    throw AlignmentError("record '" + record.record_id + "' side " + to_string(side) +
                         ": a token straddles the prompt/response boundary");

  std::vector<double> logprobs;
  logprobs.reserve(echo.tokens.size() - first);
  for (std::size_t i = first; i < echo.tokens.size(); ++i) {
    if (!echo.token_logprobs[i])
      throw AlignmentError("record '" + record.record_id + "' side " + to_string(side) +
                           ": missing logprob inside the response span");
    logprobs.push_back(*echo.token_logprobs[i]);
  }
  return logprobs;
}

inline PerplexitySummary summarize_response(const DialogueRecord& record, Side side,
                                            ScoringClient& client,
                                            const std::string& scorer_model) {
  return summarize_logprobs(record.record_id, side, scorer_model,
                            fetch_response_logprobs(record, side, client, scorer_model));
}

}  // namespace selfbias
