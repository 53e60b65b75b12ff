#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "selfbias/corpus.hpp"
#include "selfbias/errors.hpp"

namespace selfbias {

enum class PresentationOrder { original, swapped };

inline const char* to_string(PresentationOrder order) {
  return order == PresentationOrder::original ? "original" : "swapped";
}

/// Pairwise judge prompt template. The text to send is produced by
/// build_judge_prompt; `user_pattern` carries the placeholders
/// {conversation}, {response_a} and {response_b}.
struct PromptTemplate {
  std::string version;
  std::string system;
  std::string user_pattern;
};

inline constexpr const char* kPromptTemplateVersion = "pairwise-v1";

/// Built-in template. It asks for an explanation first and a final verdict
/// of exactly [[A]], [[B]] or [[C]], so the choice token always follows the
/// last "[[" marker of the completion. A copy ships under
/// resources/prompt_pairwise_v1.json for auditing and overriding.
inline const PromptTemplate& default_prompt_template() {
  static const PromptTemplate tmpl{
      kPromptTemplateVersion,
      "Please act as an impartial judge and evaluate the quality of the "
      "responses provided by two AI assistants to the conversation displayed "
      "below. You should choose the response that follows the user's "
      "instructions and answers the user's final question better. Your "
      "evaluation should consider factors such as the helpfulness, relevance, "
      "accuracy, depth, creativity, and level of detail of the responses. "
      "Begin your evaluation by comparing the two responses and provide a "
      "short explanation. Avoid any position biases and ensure that the order "
      "in which the responses were presented does not influence your "
      "decision. Do not allow the length of the responses to influence your "
      "evaluation. Do not favor certain names of the assistants. Be as "
      "objective as possible. After providing your explanation, output your "
      "final verdict by strictly following this format: \"[[A]]\" if response "
      "A is better, \"[[B]]\" if response B is better, and \"[[C]]\" for a "
      "tie.",
      "[Conversation]\n"
      "{conversation}\n"
      "\n"
      "[The Start of Response A]\n"
      "{response_a}\n"
      "[The End of Response A]\n"
      "\n"
      "[The Start of Response B]\n"
      "{response_b}\n"
      "[The End of Response B]"};
  return tmpl;
}

/// Loads a template override from a JSON file {version, system, user_pattern}.
inline PromptTemplate load_prompt_template(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open prompt template: " + path);
  nlohmann::json j;
  try {
    in >> j;
    PromptTemplate tmpl;
    tmpl.version = j.at("version").get<std::string>();
    tmpl.system = j.at("system").get<std::string>();
    tmpl.user_pattern = j.at("user_pattern").get<std::string>();
    if (tmpl.version.empty()) throw ConfigError("prompt template has empty version");
    return tmpl;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad prompt template file " + path + ": " + e.what());
  }
}

struct JudgePrompt {
  std::string system;
  std::string user;
};

namespace detail {

/// Single-pass placeholder substitution; substituted values are never
/// rescanned, so response bodies containing placeholder text stay intact.
inline std::string render_pattern(
    const std::string& pattern,
    const std::vector<std::pair<std::string, const std::string*>>& slots) {
  std::string out;
  out.reserve(pattern.size());
  std::size_t pos = 0;
  while (pos < pattern.size()) {
    std::size_t best = std::string::npos;
    const std::pair<std::string, const std::string*>* hit = nullptr;
    for (const auto& slot : slots) {
      const std::size_t found = pattern.find(slot.first, pos);
      if (found < best) {
        best = found;
        hit = &slot;
      }
    }
    if (!hit) {
      out.append(pattern, pos, std::string::npos);
      break;
    }
    out.append(pattern, pos, best - pos);
    out.append(*hit->second);
    pos = best + hit->first.size();
  }
  return out;
}

inline std::string render_conversation(const std::vector<Turn>& context) {
  std::ostringstream out;
  bool first = true;
  for (const Turn& turn : context) {
    if (!first) out << '\n';
    first = false;
    out << (turn.role == Role::user ? "User: " : "Assistant: ") << turn.content;
  }
  return out.str();
}

}  // namespace detail

/// Deterministic prompt for one record in one presentation order. Swapped
/// order exchanges which response body sits under each label; the labels
/// themselves never move.
inline JudgePrompt build_judge_prompt(const DialogueRecord& record,
                                      PresentationOrder order,
                                      const PromptTemplate& tmpl = default_prompt_template()) {
  const bool swapped = order == PresentationOrder::swapped;
  const std::string& first = swapped ? record.response_b : record.response_a;
  const std::string& second = swapped ? record.response_a : record.response_b;
  const std::string conversation = detail::render_conversation(record.context);
  std::string user = detail::render_pattern(
      tmpl.user_pattern, {{"{conversation}", &conversation},
                          {"{response_a}", &first},
                          {"{response_b}", &second}});
  return JudgePrompt{tmpl.system, std::move(user)};
}

}  // namespace selfbias
