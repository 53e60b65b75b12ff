#pragma once

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "selfbias/corpus.hpp"
#include "selfbias/errors.hpp"
#include "selfbias/judge.hpp"
#include "selfbias/prompt.hpp"
#include "selfbias/transport.hpp"

namespace selfbias {

struct ChatMessage {
  std::string role;
  std::string content;
};

struct ChatRequest {
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  int top_logprobs = 5;
};

inline nlohmann::ordered_json build_chat_request_body(const ChatRequest& request) {
  nlohmann::ordered_json messages = nlohmann::ordered_json::array();
  for (const ChatMessage& m : request.messages)
    messages.push_back({{"role", m.role}, {"content", m.content}});
  return nlohmann::ordered_json{{"model", request.model},
                                {"messages", std::move(messages)},
                                {"temperature", request.temperature},
                                {"logprobs", true},
                                {"top_logprobs", request.top_logprobs}};
}

/// Pulls the per-token logprob list out of a chat-completions response.
/// A response without logprob data is a capability problem, not transport.
inline Completion parse_chat_completion(const nlohmann::json& body) {
  if (!body.contains("choices") || !body.at("choices").is_array() || body.at("choices").empty())
    throw TransportError("chat response carries no choices");
  const nlohmann::json& choice = body.at("choices").at(0);
  const nlohmann::json* content = nullptr;
  if (choice.contains("logprobs") && choice.at("logprobs").is_object() &&
      choice.at("logprobs").contains("content") && choice.at("logprobs").at("content").is_array())
    content = &choice.at("logprobs").at("content");
  if (content == nullptr)
    throw CapabilityError("endpoint returned no token logprobs; it must support "
                          "logprobs with top_logprobs on chat completions");
  Completion completion;
  try {
    for (const nlohmann::json& tj : *content) {
      TokenLogprob token;
      token.token = tj.at("token").get<std::string>();
      token.logprob = tj.at("logprob").get<double>();
      if (tj.contains("top_logprobs")) {
        for (const nlohmann::json& aj : tj.at("top_logprobs")) {
          token.top_alternatives.push_back(
              {aj.at("token").get<std::string>(), aj.at("logprob").get<double>()});
        }
      }
      completion.tokens.push_back(std::move(token));
    }
  } catch (const nlohmann::json::exception& e) {
    throw TransportError(std::string("malformed logprob payload: ") + e.what());
  }
  return completion;
}

class ChatCompletionClient {
 public:
  virtual ~ChatCompletionClient() = default;
  virtual Completion complete(const ChatRequest& request) = 0;
};

class HttpChatClient : public ChatCompletionClient {
 public:
  explicit HttpChatClient(EndpointConfig endpoint, std::string path = "/v1/chat/completions")
      : endpoint_(std::move(endpoint)), path_(std::move(path)) {}

  Completion complete(const ChatRequest& request) override {
    return parse_chat_completion(detail::post_json(endpoint_, path_, build_chat_request_body(request)));
  }

 private:
  EndpointConfig endpoint_;
  std::string path_;
};

/// Append-only JSONL score cache keyed by (record_id, judge_model,
/// template_version). Loading tolerates a missing file; a corrupt line is
/// an error rather than silent data loss.
class VerdictCache {
 public:
  explicit VerdictCache(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream in(path_);
    if (in) {
      std::string line;
      std::size_t line_number = 0;
      while (std::getline(in, line)) {
        ++line_number;
        if (is_blank(line)) continue;
        JudgeScore score;
        try {
          score = score_from_json(nlohmann::json::parse(line));
        } catch (const std::exception& e) {
          throw CorpusError("verdict cache line " + std::to_string(line_number) + ": " + e.what());
        }
        entries_[key(score.record_id, score.judge_model, score.template_version)] = std::move(score);
      }
    }
    out_.open(path_, std::ios::app);
    if (!out_) throw CorpusError("cannot open verdict cache for writing: " + path_.string());
  }

  std::optional<JudgeScore> lookup(const std::string& record_id, const std::string& judge_model,
                                   const std::string& template_version) const {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = entries_.find(key(record_id, judge_model, template_version));
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void insert(const JudgeScore& score) {
    std::lock_guard<std::mutex> lock(mutex_);
    out_ << score_to_json(score).dump() << '\n';
    out_.flush();
    if (!out_.good()) throw CorpusError("verdict cache write failed: " + path_.string());
    entries_[key(score.record_id, score.judge_model, score.template_version)] = score;
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return entries_.size();
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  static std::string key(const std::string& record_id, const std::string& judge_model,
                         const std::string& template_version) {
    return record_id + '\x1f' + judge_model + '\x1f' + template_version;
  }

  mutable std::mutex mutex_;
  std::filesystem::path path_;
  std::unordered_map<std::string, JudgeScore> entries_;
  std::ofstream out_;
};

struct EvaluatorConfig {
  std::string judge_model;
  PromptTemplate prompt = default_prompt_template();
  double temperature = 0.0;
  int top_logprobs = 5;
  std::size_t max_concurrency = 4;
};

/// Drives the two-order judging protocol over a corpus: cache check, two
/// completions per uncached record, Eq.-3 scoring, order averaging, cache
/// write-back.
class JudgeEvaluator {
 public:
  JudgeEvaluator(ChatCompletionClient& client, VerdictCache& cache, EvaluatorConfig config)
      : client_(client), cache_(cache), config_(std::move(config)) {
    if (config_.judge_model.empty()) throw ConfigError("judge model must be set");
    if (config_.max_concurrency < 1) throw ConfigError("max concurrency must be at least 1");
  }

  struct Progress {
    std::size_t n_cached = 0;
    std::size_t n_requested = 0;
    std::size_t n_malformed = 0;
  };

  JudgeScore evaluate_record(const DialogueRecord& record) {
    return evaluate_record(record, nullptr);
  }

  /// Corpus order is preserved in the result. Worker threads pull records
  /// off a shared index; the first failure wins and is rethrown after all
  /// workers drain.
  std::vector<JudgeScore> evaluate_corpus(const std::vector<DialogueRecord>& records,
                                          Progress* progress = nullptr) {
    std::vector<JudgeScore> scores(records.size());
    Progress tally;
    std::mutex tally_mutex;
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr first_error;
    std::mutex error_mutex;

    auto worker = [&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= records.size() || failed.load()) return;
        try {
          Progress local;
          scores[i] = evaluate_record(records[i], &local);
          std::lock_guard<std::mutex> lock(tally_mutex);
          tally.n_cached += local.n_cached;
          tally.n_requested += local.n_requested;
          tally.n_malformed += local.n_malformed;
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          failed.store(true);
          return;
        }
      }
    };

    const std::size_t n_threads = std::min(config_.max_concurrency, std::max<std::size_t>(records.size(), 1));
    std::vector<std::thread> threads;
    threads.reserve(n_threads);
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (std::thread& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
    if (progress) *progress = tally;
    return scores;
  }

 private:
  JudgeScore evaluate_record(const DialogueRecord& record, Progress* progress) {
    if (auto cached = cache_.lookup(record.record_id, config_.judge_model, config_.prompt.version)) {
      if (progress) ++progress->n_cached;
      return *cached;
    }
    OrderedVerdict original = judge_once(record, PresentationOrder::original);
    OrderedVerdict swapped = judge_once(record, PresentationOrder::swapped);
    JudgeScore score =
        aggregate_orders(original, swapped, config_.judge_model, config_.prompt.version);
    if (progress) {
      progress->n_requested += 2;
      if (score.status == ScoreStatus::malformed) ++progress->n_malformed;
    }
    cache_.insert(score);
    return score;
  }

  OrderedVerdict judge_once(const DialogueRecord& record, PresentationOrder order) {
    const JudgePrompt prompt = build_judge_prompt(record, order, config_.prompt);
    ChatRequest request;
    request.model = config_.judge_model;
    request.messages = {{"system", prompt.system}, {"user", prompt.user}};
    request.temperature = config_.temperature;
    request.top_logprobs = config_.top_logprobs;
    return make_ordered_verdict(record.record_id, order, client_.complete(request));
  }

  ChatCompletionClient& client_;
  VerdictCache& cache_;
  EvaluatorConfig config_;
};

}  // namespace selfbias
