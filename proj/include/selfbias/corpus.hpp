#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "selfbias/errors.hpp"

namespace selfbias {

enum class Role { user, assistant };

struct Turn {
  Role role = Role::user;
  std::string content;

  friend bool operator==(const Turn&, const Turn&) = default;
};

enum class HumanLabel { a_wins, b_wins, tie, tie_both_bad };

/// One human-labeled comparison: a conversation context ending in a user
/// turn plus two candidate responses from distinct models.
struct DialogueRecord {
  std::string record_id;
  std::vector<Turn> context;
  std::string model_a;
  std::string model_b;
  std::string response_a;
  std::string response_b;
  HumanLabel human_label = HumanLabel::tie;

  friend bool operator==(const DialogueRecord&, const DialogueRecord&) = default;
};

struct Corpus {
  std::vector<DialogueRecord> records;
  std::string provenance;
};

enum class CorpusFormat { canonical, chatbot_arena };

struct Rejection {
  std::size_t line_number = 0;  // 1-based
  std::string reason;
};

struct ParseReport {
  Corpus corpus;
  std::vector<Rejection> rejections;
};

inline const char* to_string(Role r) {
  return r == Role::user ? "user" : "assistant";
}

inline std::optional<Role> role_from_string(const std::string& s) {
  if (s == "user") return Role::user;
  if (s == "assistant") return Role::assistant;
  return std::nullopt;
}

inline const char* to_string(HumanLabel label) {
  switch (label) {
    case HumanLabel::a_wins: return "a_wins";
    case HumanLabel::b_wins: return "b_wins";
    case HumanLabel::tie: return "tie";
    case HumanLabel::tie_both_bad: return "tie_both_bad";
  }
  return "tie";
}

inline std::optional<HumanLabel> human_label_from_string(const std::string& s) {
  if (s == "a_wins") return HumanLabel::a_wins;
  if (s == "b_wins") return HumanLabel::b_wins;
  if (s == "tie") return HumanLabel::tie;
  if (s == "tie_both_bad") return HumanLabel::tie_both_bad;
  return std::nullopt;
}

inline bool is_blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(),
                     [](unsigned char c) { return std::isspace(c) != 0; });
}

/// First violated invariant, or nullopt when the record is valid.
inline std::optional<std::string> validate_record(const DialogueRecord& rec) {
  if (rec.record_id.empty()) return "empty record_id";
  if (rec.model_a.empty() || rec.model_b.empty()) return "empty model name";
  if (rec.model_a == rec.model_b) return "model_a equals model_b";
  if (is_blank(rec.response_a)) return "empty response_a";
  if (is_blank(rec.response_b)) return "empty response_b";
  if (rec.context.empty()) return "empty context";
  bool has_user = false;
  for (const Turn& turn : rec.context) {
    if (is_blank(turn.content)) return "blank turn content";
    if (turn.role == Role::user) has_user = true;
  }
  if (!has_user) return "context has no user turn";
  if (rec.context.back().role != Role::user) return "context does not end with a user turn";
  return std::nullopt;
}

inline nlohmann::ordered_json record_to_json(const DialogueRecord& rec) {
  nlohmann::ordered_json turns = nlohmann::ordered_json::array();
  for (const Turn& t : rec.context) {
    turns.push_back({{"role", to_string(t.role)}, {"content", t.content}});
  }
  return nlohmann::ordered_json{
      {"record_id", rec.record_id}, {"context", std::move(turns)},
      {"model_a", rec.model_a},     {"model_b", rec.model_b},
      {"response_a", rec.response_a}, {"response_b", rec.response_b},
      {"human_label", to_string(rec.human_label)}};
}

/// Throws std::invalid_argument on structural problems; invariant checks
/// are the caller's job (validate_record).
inline DialogueRecord record_from_json(const nlohmann::json& j) {
  DialogueRecord rec;
  try {
    rec.record_id = j.at("record_id").get<std::string>();
    rec.model_a = j.at("model_a").get<std::string>();
    rec.model_b = j.at("model_b").get<std::string>();
    rec.response_a = j.at("response_a").get<std::string>();
    rec.response_b = j.at("response_b").get<std::string>();
    const auto label = human_label_from_string(j.at("human_label").get<std::string>());
    if (!label) throw std::invalid_argument("unknown human_label");
    rec.human_label = *label;
    for (const auto& turn_json : j.at("context")) {
      const auto role = role_from_string(turn_json.at("role").get<std::string>());
      if (!role) throw std::invalid_argument("unknown turn role");
      rec.context.push_back(Turn{*role, turn_json.at("content").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("bad record shape: ") + e.what());
  }
  return rec;
}

/// Converts one Chatbot-Arena row. The stored conversations are parallel:
/// the shared context is conversation_a minus its final assistant turn and
/// each response is the final assistant turn of its conversation.
/// Winner strings map as "model_a"->a_wins, "model_b"->b_wins, "tie"->tie,
/// "tie (bothbad)"->tie_both_bad.
inline DialogueRecord record_from_chatbot_arena(const nlohmann::json& j) {
  DialogueRecord rec;
  try {
    const auto& id = j.at("question_id");
    rec.record_id = id.is_string() ? id.get<std::string>() : id.dump();
    rec.model_a = j.at("model_a").get<std::string>();
    rec.model_b = j.at("model_b").get<std::string>();

    const std::string winner = j.at("winner").get<std::string>();
    if (winner == "model_a") rec.human_label = HumanLabel::a_wins;
    else if (winner == "model_b") rec.human_label = HumanLabel::b_wins;
    else if (winner == "tie") rec.human_label = HumanLabel::tie;
    else if (winner == "tie (bothbad)") rec.human_label = HumanLabel::tie_both_bad;
    else throw std::invalid_argument("unknown winner value: " + winner);

    auto parse_conv = [](const nlohmann::json& conv) {
      std::vector<Turn> turns;
      for (const auto& turn_json : conv) {
        const auto role = role_from_string(turn_json.at("role").get<std::string>());
        if (!role) throw std::invalid_argument("unknown turn role");
        turns.push_back(Turn{*role, turn_json.at("content").get<std::string>()});
      }
      return turns;
    };
    std::vector<Turn> conv_a = parse_conv(j.at("conversation_a"));
    std::vector<Turn> conv_b = parse_conv(j.at("conversation_b"));
    if (conv_a.empty() || conv_a.back().role != Role::assistant)
      throw std::invalid_argument("conversation_a does not end with an assistant turn");
    if (conv_b.empty() || conv_b.back().role != Role::assistant)
      throw std::invalid_argument("conversation_b does not end with an assistant turn");
    rec.response_a = conv_a.back().content;
    rec.response_b = conv_b.back().content;
    conv_a.pop_back();
    rec.context = std::move(conv_a);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("bad chatbot-arena record shape: ") + e.what());
  }
  return rec;
}

/// Parses line-delimited records. Every line becomes a validated record or
/// a rejection (line number + reason). Duplicate record ids and empty
/// result sets are hard errors.
inline ParseReport parse_corpus_stream(std::istream& in, CorpusFormat format,
                                       const std::string& provenance) {
  ParseReport report;
  report.corpus.provenance = provenance;
  std::unordered_set<std::string> seen_ids;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (is_blank(line)) continue;
    DialogueRecord rec;
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      rec = format == CorpusFormat::canonical ? record_from_json(j)
                                              : record_from_chatbot_arena(j);
    } catch (const std::exception& e) {
      report.rejections.push_back({line_number, e.what()});
      continue;
    }
    if (auto reason = validate_record(rec)) {
      report.rejections.push_back({line_number, *reason});
      continue;
    }
    if (!seen_ids.insert(rec.record_id).second) {
      throw CorpusError("duplicate record_id '" + rec.record_id + "' at line " +
                        std::to_string(line_number));
    }
    report.corpus.records.push_back(std::move(rec));
  }
  if (report.corpus.records.empty()) {
    throw CorpusError("no valid records in " + provenance);
  }
  return report;
}

inline ParseReport parse_corpus(const std::string& path, CorpusFormat format) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open corpus file: " + path);
  return parse_corpus_stream(in, format, path);
}

inline void write_corpus(std::ostream& out, const Corpus& corpus) {
  for (const DialogueRecord& rec : corpus.records) {
    out << record_to_json(rec).dump() << '\n';
  }
}

inline void write_corpus_file(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot write corpus file: " + path);
  write_corpus(out, corpus);
}

struct SelfPairSelection {
  std::vector<DialogueRecord> selected;  // exactly one side is judge-generated
  std::size_t n_excluded_no_self = 0;
  std::size_t n_excluded_both_self = 0;
};

/// Records where exactly one of the two models is the judge itself.
inline SelfPairSelection select_self_pairs(const Corpus& corpus,
                                           const std::string& judge_model) {
  if (judge_model.empty()) throw std::invalid_argument("judge_model is empty");
  SelfPairSelection out;
  for (const DialogueRecord& rec : corpus.records) {
    const int matches = (rec.model_a == judge_model ? 1 : 0) +
                        (rec.model_b == judge_model ? 1 : 0);
    if (matches == 1) out.selected.push_back(rec);
    else if (matches == 0) ++out.n_excluded_no_self;
    else ++out.n_excluded_both_self;
  }
  return out;
}

}  // namespace selfbias
