#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "selfbias/corpus.hpp"
#include "selfbias/errors.hpp"
#include "selfbias/judge.hpp"
#include "selfbias/metrics.hpp"
#include "selfbias/perplexity.hpp"
#include "selfbias/rng.hpp"

namespace selfbias {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

namespace detail {

/// ln(1 + e^t) without overflow.
inline double softplus(double t) {
  return (t > 0.0 ? t : 0.0) + std::log1p(std::exp(-std::fabs(t)));
}

inline std::string sim_record_id(std::size_t i) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "sim-%06zu", i);
  return buf;
}

}  // namespace detail

// -- confusion-table judge ----------------------------------------------------

/// Conditional-recall judge: t1 = P(judge prefers self | human prefers self),
/// t0 = P(judge prefers other | human prefers other). Ground-truth
/// equal-opportunity bias is t1 - t0 by construction.
struct SyntheticJudgeConfig {
  double t1 = 0.7;
  double t0 = 0.7;
  double p_human_self = 0.5;
  std::size_t n = 1000;
  std::uint64_t seed = 0;
};

inline void validate(const SyntheticJudgeConfig& c) {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0))
      throw std::invalid_argument(std::string(name) + " must lie in [0, 1]");
  };
  prob(c.t1, "t1");
  prob(c.t0, "t0");
  prob(c.p_human_self, "p_human_self");
  if (c.n < 1) throw std::invalid_argument("n must be at least 1");
}

inline double expected_eo_bias(const SyntheticJudgeConfig& c) { return c.t1 - c.t0; }

inline double expected_dp_bias(const SyntheticJudgeConfig& c) {
  const double p_judge_self = c.p_human_self * c.t1 + (1.0 - c.p_human_self) * (1.0 - c.t0);
  return 2.0 * p_judge_self - 1.0;
}

/// Two Bernoulli draws per record (human side, then judge side conditional
/// on it); self_is_a alternates deterministically.
inline std::vector<SelfPairObservation> generate_observations(const SyntheticJudgeConfig& config) {
  validate(config);
  Rng rng(config.seed);
  std::vector<SelfPairObservation> out;
  out.reserve(config.n);
  for (std::size_t i = 0; i < config.n; ++i) {
    SelfPairObservation obs;
    obs.record_id = detail::sim_record_id(i);
    obs.self_is_a = i % 2 == 0;
    const bool human_self = rng.bernoulli(config.p_human_self);
    const bool judge_matches = rng.bernoulli(human_self ? config.t1 : config.t0);
    obs.human = human_self ? Preference::self : Preference::other;
    const bool judge_self = human_self ? judge_matches : !judge_matches;
    obs.judge = judge_self ? Preference::self : Preference::other;
    out.push_back(std::move(obs));
  }
  return out;
}

namespace detail {

inline Turn sim_prompt_turn(const std::string& record_id) {
  return Turn{Role::user, "Synthetic prompt for " + record_id + "."};
}

/// Cache-shaped score consistent with a deterministic verdict: 0.9/0.1
/// split, with per-order distributions that aggregate back to it exactly.
inline JudgeScore sim_score(const std::string& record_id, const std::string& judge_model,
                            bool a_wins) {
  const double s = a_wins ? 0.9 : 0.1;
  OrderedVerdict original;
  original.record_id = record_id;
  original.order = PresentationOrder::original;
  original.distribution = ChoiceDistribution{s, 1.0 - s, std::nullopt, 0};
  original.score_first_slot = s;
  OrderedVerdict swapped;
  swapped.record_id = record_id;
  swapped.order = PresentationOrder::swapped;
  swapped.distribution = ChoiceDistribution{1.0 - s, s, std::nullopt, 0};
  swapped.score_first_slot = 1.0 - s;
  return aggregate_orders(original, swapped, judge_model, kPromptTemplateVersion);
}

}  // namespace detail

/// Corpus-shaped view of a synthetic judge: records place the judge's
/// response on the observation's self side, and scores binarize back to the
/// observation's judge preference.
struct JudgeWorld {
  std::vector<DialogueRecord> records;
  std::vector<JudgeScore> scores;
  std::vector<SelfPairObservation> observations;
};

inline JudgeWorld generate_judge_world(const SyntheticJudgeConfig& config,
                                       const std::string& judge_model,
                                       const std::string& other_model) {
  if (judge_model.empty() || other_model.empty() || judge_model == other_model)
    throw std::invalid_argument("judge and other model names must be distinct and non-empty");
  JudgeWorld world;
  world.observations = generate_observations(config);
  world.records.reserve(config.n);
  world.scores.reserve(config.n);
  for (const SelfPairObservation& obs : world.observations) {
    DialogueRecord rec;
    rec.record_id = obs.record_id;
    rec.model_a = obs.self_is_a ? judge_model : other_model;
    rec.model_b = obs.self_is_a ? other_model : judge_model;
    rec.context = {detail::sim_prompt_turn(obs.record_id)};
    rec.response_a = "Response in slot A for " + obs.record_id + ".";
    rec.response_b = "Response in slot B for " + obs.record_id + ".";
    const bool human_picked_a = (obs.human == Preference::self) == obs.self_is_a;
    rec.human_label = human_picked_a ? HumanLabel::a_wins : HumanLabel::b_wins;
    const bool judge_picked_a = (obs.judge == Preference::self) == obs.self_is_a;
    world.scores.push_back(detail::sim_score(obs.record_id, judge_model, judge_picked_a));
    world.records.push_back(std::move(rec));
  }
  return world;
}

// -- logistic perplexity world -------------------------------------------------

enum class DeltaFamily { uniform, normal };

inline const char* to_string(DeltaFamily f) {
  return f == DeltaFamily::uniform ? "uniform" : "normal";
}

inline DeltaFamily delta_family_from_string(const std::string& s) {
  if (s == "uniform") return DeltaFamily::uniform;
  if (s == "normal") return DeltaFamily::normal;
  throw std::invalid_argument("unknown delta family: '" + s + "'");
}

/// uniform: [center - spread, center + spread]; normal: mean center,
/// standard deviation spread.
struct DeltaDistribution {
  DeltaFamily family = DeltaFamily::uniform;
  double center = 0.0;
  double spread = 1.0;
};

/// Logistic world: P(human picks A) = sigmoid(-w_human * delta) and
/// P(judge picks A) = sigmoid(-w_judge * delta + self_bonus * s) with
/// s = +1 / -1 / 0 for the judge's response in slot A / slot B / absent.
/// self_bonus is therefore a log-odds bonus for the self side regardless
/// of position.
struct PerplexityWorldConfig {
  double w_judge = 1.0;
  double w_human = 1.0;
  double self_bonus = 0.0;
  DeltaDistribution delta_distribution;
  double p_self_pair = 0.5;
  std::string judge_model = "judge-model";
  std::string rival_model_a = "rival-1";
  std::string rival_model_b = "rival-2";
  std::size_t n = 1000;
  std::uint64_t seed = 0;
};

inline void validate(const PerplexityWorldConfig& c) {
  if (c.n < 1) throw std::invalid_argument("n must be at least 1");
  if (!(c.p_self_pair >= 0.0 && c.p_self_pair <= 1.0))
    throw std::invalid_argument("p_self_pair must lie in [0, 1]");
  if (!(c.delta_distribution.spread > 0.0))
    throw std::invalid_argument("delta spread must be positive");
  if (!std::isfinite(c.w_judge) || !std::isfinite(c.w_human) || !std::isfinite(c.self_bonus))
    throw std::invalid_argument("world weights must be finite");
  if (c.judge_model.empty() || c.rival_model_a.empty() || c.rival_model_b.empty())
    throw std::invalid_argument("model names must be non-empty");
  if (c.judge_model == c.rival_model_a || c.judge_model == c.rival_model_b ||
      c.rival_model_a == c.rival_model_b)
    throw std::invalid_argument("model names must be pairwise distinct");
}

/// Everything the downstream analyses consume, with realized deltas kept as
/// ground truth. deltas[i] is recomputed from the stored summaries, so
/// compute_deltas over the summaries reproduces it bit for bit.
struct PerplexityWorld {
  std::vector<DialogueRecord> records;
  std::vector<PairVerdict> judge_verdicts;
  std::vector<HumanLabel> human_labels;
  std::vector<PerplexitySummary> summaries;
  std::vector<PerplexityDelta> deltas;
  std::vector<JudgeScore> scores;
};

inline PerplexityWorld generate_perplexity_world(const PerplexityWorldConfig& config) {
  validate(config);
  Rng rng(config.seed);
  PerplexityWorld world;
  world.records.reserve(config.n);
  constexpr std::size_t kTokenCount = 32;

  for (std::size_t i = 0; i < config.n; ++i) {
    const std::string id = detail::sim_record_id(i);
    const bool has_self = rng.bernoulli(config.p_self_pair);
    const bool self_is_a = has_self && rng.bernoulli(0.5);

    const DeltaDistribution& dist = config.delta_distribution;
    const double sampled = dist.family == DeltaFamily::uniform
                               ? rng.uniform(dist.center - dist.spread, dist.center + dist.spread)
                               : rng.normal(dist.center, dist.spread);
    // Keep both sides' mean NLL non-negative whatever the delta's sign.
    const double nll_b = 2.0 + std::max(0.0, -sampled);
    const double nll_a = nll_b + sampled;
    const double delta = nll_a - nll_b;  // realized ground truth

    const bool human_a = rng.bernoulli(sigmoid(-config.w_human * delta));
    const double s = has_self ? (self_is_a ? 1.0 : -1.0) : 0.0;
    const bool judge_a = rng.bernoulli(sigmoid(-config.w_judge * delta + config.self_bonus * s));

    DialogueRecord rec;
    rec.record_id = id;
    if (has_self) {
      rec.model_a = self_is_a ? config.judge_model : config.rival_model_a;
      rec.model_b = self_is_a ? config.rival_model_a : config.judge_model;
    } else {
      rec.model_a = config.rival_model_a;
      rec.model_b = config.rival_model_b;
    }
    rec.context = {detail::sim_prompt_turn(id)};
    rec.response_a = "Response in slot A for " + id + ".";
    rec.response_b = "Response in slot B for " + id + ".";
    rec.human_label = human_a ? HumanLabel::a_wins : HumanLabel::b_wins;

    PerplexitySummary sum_a{id, Side::a, config.judge_model, kTokenCount, nll_a};
    PerplexitySummary sum_b{id, Side::b, config.judge_model, kTokenCount, nll_b};

    world.records.push_back(std::move(rec));
    world.judge_verdicts.push_back(judge_a ? PairVerdict::a_wins : PairVerdict::b_wins);
    world.human_labels.push_back(human_a ? HumanLabel::a_wins : HumanLabel::b_wins);
    world.summaries.push_back(std::move(sum_a));
    world.summaries.push_back(std::move(sum_b));
    world.deltas.push_back({id, delta});
    world.scores.push_back(detail::sim_score(id, config.judge_model, judge_a));
  }
  return world;
}

// -- bin-averaged oracle --------------------------------------------------------

/// E[sigmoid(-w * x + bonus) | x in [lo, hi]] under the delta distribution,
/// restricted to the bin. Uniform family integrates in closed form; normal
/// family uses composite Simpson quadrature against the truncated density.
inline double expected_win_rate_in_bin(double w, double bonus, double lo, double hi,
                                       const DeltaDistribution& dist) {
  if (!(lo < hi)) throw std::invalid_argument("bin must satisfy lo < hi");
  if (!(dist.spread > 0.0)) throw std::invalid_argument("delta spread must be positive");

  if (dist.family == DeltaFamily::uniform) {
    const double left = std::max(lo, dist.center - dist.spread);
    const double right = std::min(hi, dist.center + dist.spread);
    if (!(left < right)) throw std::invalid_argument("bin lies outside the delta support");
    if (w == 0.0) return sigmoid(bonus);
    // antiderivative of sigmoid(-w x + bonus) is -softplus(bonus - w x)/w
    const double upper = -detail::softplus(bonus - w * right) / w;
    const double lower = -detail::softplus(bonus - w * left) / w;
    return (upper - lower) / (right - left);
  }

  const auto density = [&](double x) {
    const double z = (x - dist.center) / dist.spread;
    return std::exp(-0.5 * z * z);
  };
  const auto integrand = [&](double x) { return sigmoid(-w * x + bonus) * density(x); };
  constexpr std::size_t kIntervals = 4096;  // Simpson needs an even count
  const double h = (hi - lo) / static_cast<double>(kIntervals);
  double num = integrand(lo) + integrand(hi);
  double den = density(lo) + density(hi);
  for (std::size_t k = 1; k < kIntervals; ++k) {
    const double x = lo + h * static_cast<double>(k);
    const double weight = k % 2 == 1 ? 4.0 : 2.0;
    num += weight * integrand(x);
    den += weight * density(x);
  }
  if (den <= 0.0) throw std::invalid_argument("bin carries no probability mass");
  return num / den;
}

}  // namespace selfbias
