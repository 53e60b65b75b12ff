#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "selfbias/errors.hpp"
#include "selfbias/prompt.hpp"

namespace selfbias {

struct TopAlternative {
  std::string token;
  double logprob = 0.0;
};

struct TokenLogprob {
  std::string token;
  double logprob = 0.0;
  std::vector<TopAlternative> top_alternatives;
};

/// A sampled completion with per-token log-probabilities and the
/// top-alternative candidates at each position.
struct Completion {
  std::vector<TokenLogprob> tokens;

  std::string text() const {
    std::string out;
    for (const TokenLogprob& t : tokens) out += t.token;
    return out;
  }
};

/// Raw probabilities of the choice tokens read off one completion. These
/// are token probabilities from a larger vocabulary and need not sum to 1.
struct ChoiceDistribution {
  double p_a = 0.0;
  double p_b = 0.0;
  std::optional<double> p_c;
  std::size_t source_token_position = 0;
};

namespace detail {

/// Candidate probabilities at one token position, keyed by choice letter.
/// `prefix` is the part of the position's sampled token that precedes the
/// choice character (empty when the marker ended exactly at the previous
/// token; "[[" when the marker was fused into this token). Exact matches
/// (prefix + letter) win over prefix matches (prefix + letter + tail); among
/// equals the higher probability wins.
struct ChoiceHit {
  double logprob = -std::numeric_limits<double>::infinity();
  bool exact = false;
  bool found = false;
};

inline void consider_choice(const std::string& token, double logprob,
                            const std::string& prefix, ChoiceHit hits[3]) {
  if (token.size() <= prefix.size() || token.compare(0, prefix.size(), prefix) != 0) return;
  const char c = token[prefix.size()];
  int idx;
  if (c == 'A') idx = 0;
  else if (c == 'B') idx = 1;
  else if (c == 'C') idx = 2;
  else return;
  const bool exact = token.size() == prefix.size() + 1;
  ChoiceHit& hit = hits[idx];
  if (!hit.found || (exact && !hit.exact) ||
      (exact == hit.exact && logprob > hit.logprob)) {
    hit = ChoiceHit{logprob, exact, true};
  }
}

}  // namespace detail

/// Reads the choice-token probabilities at the position following the last
/// "[[" verdict marker of the completion. Handles tokenizers that fuse the
/// marker and the choice character into one token by prefix-matching the
/// alternatives at the fused position. Returns nullopt (malformed) when no
/// marker is present, the completion ends at the marker, or the A and B
/// choice tokens are not both visible among the top alternatives.
inline std::optional<ChoiceDistribution> extract_choice_distribution(
    const Completion& completion) {
  const std::string full = completion.text();
  const std::size_t marker = full.rfind("[[");
  if (marker == std::string::npos) return std::nullopt;
  const std::size_t choice_offset = marker + 2;
  if (choice_offset >= full.size()) return std::nullopt;

  // Token whose span contains the character right after the marker.
  std::size_t start = 0;
  std::size_t position = completion.tokens.size();
  for (std::size_t i = 0; i < completion.tokens.size(); ++i) {
    const std::size_t end = start + completion.tokens[i].token.size();
    if (choice_offset >= start && choice_offset < end) {
      position = i;
      break;
    }
    start = end;
  }
  if (position == completion.tokens.size()) return std::nullopt;

  const TokenLogprob& at = completion.tokens[position];
  const std::string prefix = full.substr(start, choice_offset - start);

  detail::ChoiceHit hits[3];
  detail::consider_choice(at.token, at.logprob, prefix, hits);
  for (const TopAlternative& alt : at.top_alternatives) {
    detail::consider_choice(alt.token, alt.logprob, prefix, hits);
  }
  if (!hits[0].found || !hits[1].found) return std::nullopt;

  ChoiceDistribution dist;
  dist.p_a = std::exp(hits[0].logprob);
  dist.p_b = std::exp(hits[1].logprob);
  if (hits[2].found) dist.p_c = std::exp(hits[2].logprob);
  dist.source_token_position = position;
  return dist;
}

/// Score of the response labeled A: p_a / (p_a + p_b). The tie-token
/// probability is deliberately left out of the normalization.
inline double normalize_score(const ChoiceDistribution& dist) {
  if (dist.p_a < 0.0 || dist.p_b < 0.0)
    throw std::invalid_argument("negative choice probability");
  const double denom = dist.p_a + dist.p_b;
  if (denom == 0.0)
    throw std::invalid_argument("cannot normalize: p_a and p_b are both zero");
  return dist.p_a / denom;
}

/// One presentation order's outcome: the raw choice distribution plus the
/// normalized score of whichever response occupied the first (A) slot.
/// A missing distribution means the completion was malformed.
struct OrderedVerdict {
  std::string record_id;
  PresentationOrder order = PresentationOrder::original;
  std::optional<ChoiceDistribution> distribution;
  std::optional<double> score_first_slot;
};

inline OrderedVerdict make_ordered_verdict(std::string record_id,
                                           PresentationOrder order,
                                           const Completion& completion) {
  OrderedVerdict v;
  v.record_id = std::move(record_id);
  v.order = order;
  v.distribution = extract_choice_distribution(completion);
  if (v.distribution) v.score_first_slot = normalize_score(*v.distribution);
  return v;
}

enum class ScoreStatus { ok, malformed };

inline const char* to_string(ScoreStatus s) {
  return s == ScoreStatus::ok ? "ok" : "malformed";
}

/// Position-debiased preference for one record: per-response scores averaged
/// over both presentation orders. score_a and score_b are valid only when
/// status is ok; they sum to 1 up to rounding.
struct JudgeScore {
  std::string record_id;
  std::string judge_model;
  std::string template_version;
  ScoreStatus status = ScoreStatus::malformed;
  double score_a = std::numeric_limits<double>::quiet_NaN();
  double score_b = std::numeric_limits<double>::quiet_NaN();
  std::vector<OrderedVerdict> per_order;
};

/// Averages the two orders. In the original order response A occupies the
/// first slot; in the swapped order it occupies the second, so its score
/// there is one minus the first-slot score. Either order malformed makes
/// the whole record malformed.
inline JudgeScore aggregate_orders(const OrderedVerdict& original,
                                   const OrderedVerdict& swapped,
                                   std::string judge_model,
                                   std::string template_version) {
  if (original.order != PresentationOrder::original ||
      swapped.order != PresentationOrder::swapped)
    throw std::invalid_argument("aggregate_orders: verdicts in the wrong order slots");
  if (original.record_id != swapped.record_id)
    throw std::invalid_argument("aggregate_orders: record ids do not match ('" +
                                original.record_id + "' vs '" + swapped.record_id + "')");
  JudgeScore score;
  score.record_id = original.record_id;
  score.judge_model = std::move(judge_model);
  score.template_version = std::move(template_version);
  score.per_order = {original, swapped};
  if (!original.score_first_slot || !swapped.score_first_slot) {
    score.status = ScoreStatus::malformed;
    return score;
  }
  const double s_orig = *original.score_first_slot;
  const double s_swap = *swapped.score_first_slot;
  score.status = ScoreStatus::ok;
  score.score_a = (s_orig + (1.0 - s_swap)) / 2.0;
  score.score_b = ((1.0 - s_orig) + s_swap) / 2.0;
  return score;
}

enum class PairVerdict { a_wins, b_wins, judge_tie };

inline const char* to_string(PairVerdict v) {
  switch (v) {
    case PairVerdict::a_wins: return "a_wins";
    case PairVerdict::b_wins: return "b_wins";
    case PairVerdict::judge_tie: return "judge_tie";
  }
  return "judge_tie";
}

/// Thresholds an ok score into a binary verdict; an exact hit on the
/// threshold is a judge tie, which downstream metrics exclude and count.
inline PairVerdict binarize_verdict(const JudgeScore& score, double threshold = 0.5) {
  if (score.status != ScoreStatus::ok)
    throw std::invalid_argument("binarize_verdict: score is malformed");
  if (score.score_a > threshold) return PairVerdict::a_wins;
  if (score.score_a < threshold) return PairVerdict::b_wins;
  return PairVerdict::judge_tie;
}

// -- cache/file serialization ------------------------------------------------

inline nlohmann::ordered_json ordered_verdict_to_json(const OrderedVerdict& v) {
  nlohmann::ordered_json j{{"order", to_string(v.order)}};
  if (v.distribution) {
    j["p_a"] = v.distribution->p_a;
    j["p_b"] = v.distribution->p_b;
    if (v.distribution->p_c) j["p_c"] = *v.distribution->p_c;
    j["token_position"] = v.distribution->source_token_position;
    j["score_first_slot"] = *v.score_first_slot;
  } else {
    j["malformed"] = true;
  }
  return j;
}

inline nlohmann::ordered_json score_to_json(const JudgeScore& score) {
  nlohmann::ordered_json j{{"record_id", score.record_id},
                           {"judge_model", score.judge_model},
                           {"template_version", score.template_version},
                           {"status", to_string(score.status)}};
  if (score.status == ScoreStatus::ok) {
    j["score_a"] = score.score_a;
    j["score_b"] = score.score_b;
  }
  nlohmann::ordered_json orders = nlohmann::ordered_json::array();
  for (const OrderedVerdict& v : score.per_order) orders.push_back(ordered_verdict_to_json(v));
  j["per_order"] = std::move(orders);
  return j;
}

inline JudgeScore score_from_json(const nlohmann::json& j) {
  JudgeScore score;
  try {
    score.record_id = j.at("record_id").get<std::string>();
    score.judge_model = j.at("judge_model").get<std::string>();
    score.template_version = j.at("template_version").get<std::string>();
    const std::string status = j.at("status").get<std::string>();
    if (status == "ok") {
      score.status = ScoreStatus::ok;
      score.score_a = j.at("score_a").get<double>();
      score.score_b = j.at("score_b").get<double>();
    } else if (status == "malformed") {
      score.status = ScoreStatus::malformed;
    } else {
      throw std::invalid_argument("unknown score status: " + status);
    }
    if (j.contains("per_order")) {
      for (const auto& vj : j.at("per_order")) {
        OrderedVerdict v;
        v.record_id = score.record_id;
        v.order = vj.at("order").get<std::string>() == "swapped"
                      ? PresentationOrder::swapped
                      : PresentationOrder::original;
        if (!vj.value("malformed", false) && vj.contains("p_a")) {
          ChoiceDistribution dist;
          dist.p_a = vj.at("p_a").get<double>();
          dist.p_b = vj.at("p_b").get<double>();
          if (vj.contains("p_c") && !vj.at("p_c").is_null())
            dist.p_c = vj.at("p_c").get<double>();
          dist.source_token_position = vj.value("token_position", 0u);
          v.distribution = dist;
          v.score_first_slot = vj.at("score_first_slot").get<double>();
        }
        score.per_order.push_back(std::move(v));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("bad judge score shape: ") + e.what());
  }
  return score;
}

}  // namespace selfbias
