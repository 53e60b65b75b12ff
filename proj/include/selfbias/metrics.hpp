#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "selfbias/corpus.hpp"
#include "selfbias/errors.hpp"
#include "selfbias/judge.hpp"
#include "selfbias/rng.hpp"

namespace selfbias {

enum class Preference { self, other };

inline const char* to_string(Preference p) {
  return p == Preference::self ? "self" : "other";
}

/// One record reduced to the self/other frame: which response the human
/// preferred and which the judge preferred, relative to the judge's own
/// response in the pair.
struct SelfPairObservation {
  std::string record_id;
  bool self_is_a = false;
  Preference human = Preference::other;
  Preference judge = Preference::other;
};

enum class ExclusionReason { human_tie, judge_tie, judge_malformed };

inline const char* to_string(ExclusionReason r) {
  switch (r) {
    case ExclusionReason::human_tie: return "human_tie";
    case ExclusionReason::judge_tie: return "judge_tie";
    case ExclusionReason::judge_malformed: return "judge_malformed";
  }
  return "judge_malformed";
}

/// Exactly one of the two fields is set.
struct OrientOutcome {
  std::optional<SelfPairObservation> observation;
  std::optional<ExclusionReason> exclusion;
};

namespace detail {

inline bool judge_is_model_a(const DialogueRecord& record,
                             const std::string& judge_model) {
  const bool a = record.model_a == judge_model;
  const bool b = record.model_b == judge_model;
  if (a == b)
    throw std::invalid_argument("record '" + record.record_id + "' is not a self pair for '" +
                                judge_model + "'");
  return a;
}

}  // namespace detail

/// Orients a binarized judge verdict. Human ties (either kind) and judge
/// ties drop the record with the reason recorded.
inline OrientOutcome orient_observation(const DialogueRecord& record,
                                        const std::string& judge_model,
                                        PairVerdict verdict) {
  const bool self_is_a = detail::judge_is_model_a(record, judge_model);
  if (record.human_label == HumanLabel::tie ||
      record.human_label == HumanLabel::tie_both_bad)
    return {std::nullopt, ExclusionReason::human_tie};
  if (verdict == PairVerdict::judge_tie)
    return {std::nullopt, ExclusionReason::judge_tie};

  SelfPairObservation obs;
  obs.record_id = record.record_id;
  obs.self_is_a = self_is_a;
  const bool human_picked_a = record.human_label == HumanLabel::a_wins;
  const bool judge_picked_a = verdict == PairVerdict::a_wins;
  obs.human = human_picked_a == self_is_a ? Preference::self : Preference::other;
  obs.judge = judge_picked_a == self_is_a ? Preference::self : Preference::other;
  return {obs, std::nullopt};
}

/// Same, starting from a scored record. Malformed scores are excluded, not
/// errors. Throws if the score belongs to a different record.
inline OrientOutcome orient_observation(const DialogueRecord& record,
                                        const std::string& judge_model,
                                        const JudgeScore& score,
                                        double threshold = 0.5) {
  if (score.record_id != record.record_id)
    throw std::invalid_argument("score for record '" + score.record_id +
                                "' paired with record '" + record.record_id + "'");
  if (score.status != ScoreStatus::ok) {
    detail::judge_is_model_a(record, judge_model);  // still validate the pair
    return {std::nullopt, ExclusionReason::judge_malformed};
  }
  return orient_observation(record, judge_model, binarize_verdict(score, threshold));
}

/// 2x2 agreement table in the self/other frame. First index: human
/// preference (1 = self). Second index: judge preference (1 = self).
struct ConfusionCounts {
  std::uint64_t n11 = 0;  // human self, judge self
  std::uint64_t n10 = 0;  // human self, judge other
  std::uint64_t n01 = 0;  // human other, judge self
  std::uint64_t n00 = 0;  // human other, judge other

  std::uint64_t total() const { return n11 + n10 + n01 + n00; }

  void add(const SelfPairObservation& obs) {
    if (obs.human == Preference::self) {
      obs.judge == Preference::self ? ++n11 : ++n10;
    } else {
      obs.judge == Preference::self ? ++n01 : ++n00;
    }
  }

  bool operator==(const ConfusionCounts&) const = default;
};

inline ConfusionCounts accumulate_confusion(const std::vector<SelfPairObservation>& observations) {
  ConfusionCounts counts;
  for (const SelfPairObservation& obs : observations) counts.add(obs);
  return counts;
}

/// P(judge prefers self | human prefers self).
inline double recall_self(const ConfusionCounts& c) {
  const std::uint64_t denom = c.n11 + c.n10;
  if (denom == 0) throw AnalysisError("no records where the human preferred self");
  return static_cast<double>(c.n11) / static_cast<double>(denom);
}

/// P(judge prefers other | human prefers other).
inline double recall_other(const ConfusionCounts& c) {
  const std::uint64_t denom = c.n01 + c.n00;
  if (denom == 0) throw AnalysisError("no records where the human preferred other");
  return static_cast<double>(c.n00) / static_cast<double>(denom);
}

/// Equal-opportunity gap: recall on human-prefers-self records minus recall
/// on human-prefers-other records. Zero for a judge whose accuracy does not
/// depend on which side is its own.
inline double eo_bias(const ConfusionCounts& c) {
  return recall_self(c) - recall_other(c);
}

/// Demographic-parity gap: 2 * P(judge prefers self) - 1. Zero when the
/// judge picks its own response exactly half the time.
inline double dp_bias(const ConfusionCounts& c) {
  const std::uint64_t total = c.total();
  if (total == 0) throw AnalysisError("no observations");
  const double p_self = static_cast<double>(c.n11 + c.n01) / static_cast<double>(total);
  return 2.0 * p_self - 1.0;
}

inline double dp_bias(const std::vector<SelfPairObservation>& observations) {
  return dp_bias(accumulate_confusion(observations));
}

// -- percentile bootstrap ------------------------------------------------------

struct BootstrapConfig {
  std::size_t n_resamples = 1000;
  double confidence = 0.95;
  std::uint64_t seed = 0;
  /// Resamples whose statistic is undefined (e.g. an empty confusion row)
  /// are redrawn; this bounds the total number of extra draws.
  std::size_t max_redraws = 1000;
};

struct BootstrapInterval {
  double low = 0.0;
  double high = 0.0;
  double confidence = 0.0;
  std::size_t n_resamples = 0;
  std::uint64_t seed = 0;
  std::size_t n_redraws = 0;
};

namespace detail {

/// Linear-interpolation quantile of a sorted sample (the same rule R and
/// numpy use by default).
inline double sorted_quantile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("quantile of empty sample");
  if (sorted.size() == 1) return sorted.front();
  const double h = static_cast<double>(sorted.size() - 1) * p;
  const std::size_t lo = static_cast<std::size_t>(h);
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace detail

/// Record-level percentile bootstrap. Each resample draws n observations
/// with replacement from its own deterministic substream, applies
/// `statistic`, and the interval is read off the resample distribution's
/// quantiles. A statistic may reject a degenerate resample by throwing
/// AnalysisError; the resample is then redrawn, up to cfg.max_redraws in
/// total, after which the error propagates.
template <typename StatisticFn>
BootstrapInterval bootstrap_ci(const std::vector<SelfPairObservation>& observations,
                               StatisticFn&& statistic, const BootstrapConfig& cfg) {
  if (observations.empty()) throw AnalysisError("bootstrap over zero observations");
  if (cfg.n_resamples < 100) throw std::invalid_argument("need at least 100 resamples");
  if (!(cfg.confidence > 0.0 && cfg.confidence < 1.0))
    throw std::invalid_argument("confidence must lie in (0, 1)");

  const std::size_t n = observations.size();
  std::vector<double> stats;
  stats.reserve(cfg.n_resamples);
  std::size_t redraws = 0;

  std::vector<SelfPairObservation> resample(n);
  for (std::size_t b = 0; b < cfg.n_resamples; ++b) {
    Rng rng = Rng::split(cfg.seed, b);
    for (;;) {
      for (std::size_t i = 0; i < n; ++i)
        resample[i] = observations[rng.below(static_cast<std::uint64_t>(n))];
      try {
        stats.push_back(statistic(resample));
        break;
      } catch (const AnalysisError&) {
        if (++redraws > cfg.max_redraws)
          throw AnalysisError("bootstrap redraw budget exhausted; statistic is degenerate on this sample");
      }
    }
  }

  std::sort(stats.begin(), stats.end());
  const double alpha = 1.0 - cfg.confidence;
  BootstrapInterval interval;
  interval.low = detail::sorted_quantile(stats, alpha / 2.0);
  interval.high = detail::sorted_quantile(stats, 1.0 - alpha / 2.0);
  interval.confidence = cfg.confidence;
  interval.n_resamples = cfg.n_resamples;
  interval.seed = cfg.seed;
  interval.n_redraws = redraws;
  return interval;
}

inline BootstrapInterval bootstrap_eo_ci(const std::vector<SelfPairObservation>& observations,
                                         const BootstrapConfig& cfg) {
  return bootstrap_ci(
      observations,
      [](const std::vector<SelfPairObservation>& sample) {
        return eo_bias(accumulate_confusion(sample));
      },
      cfg);
}

inline BootstrapInterval bootstrap_dp_ci(const std::vector<SelfPairObservation>& observations,
                                         const BootstrapConfig& cfg) {
  return bootstrap_ci(
      observations,
      [](const std::vector<SelfPairObservation>& sample) { return dp_bias(sample); },
      cfg);
}

// -- assembled report ----------------------------------------------------------

struct BiasStatistic {
  double value = 0.0;
  std::optional<BootstrapInterval> interval;
};

struct ExclusionTally {
  std::uint64_t human_tie = 0;
  std::uint64_t judge_tie = 0;
  std::uint64_t judge_malformed = 0;

  std::uint64_t total() const { return human_tie + judge_tie + judge_malformed; }

  void add(ExclusionReason reason) {
    switch (reason) {
      case ExclusionReason::human_tie: ++human_tie; break;
      case ExclusionReason::judge_tie: ++judge_tie; break;
      case ExclusionReason::judge_malformed: ++judge_malformed; break;
    }
  }
};

struct BiasReport {
  std::string judge_model;
  std::uint64_t n_self_pairs = 0;
  std::uint64_t n_excluded_no_self = 0;
  std::uint64_t n_excluded_both_self = 0;
  ExclusionTally exclusions;
  std::uint64_t n_observations = 0;
  ConfusionCounts confusion;
  double recall_when_human_prefers_self = 0.0;
  double recall_when_human_prefers_other = 0.0;
  BiasStatistic equal_opportunity;
  BiasStatistic demographic_parity;
};

/// Computes every derived field of the report from oriented observations.
/// Selection/exclusion tallies are the caller's bookkeeping. Without a
/// bootstrap config the intervals are left unset.
inline BiasReport compute_bias_report(const std::vector<SelfPairObservation>& observations,
                                      std::string judge_model,
                                      const std::optional<BootstrapConfig>& bootstrap = std::nullopt) {
  if (observations.empty()) throw AnalysisError("no usable observations");
  BiasReport report;
  report.judge_model = std::move(judge_model);
  report.n_observations = observations.size();
  report.confusion = accumulate_confusion(observations);
  report.recall_when_human_prefers_self = recall_self(report.confusion);
  report.recall_when_human_prefers_other = recall_other(report.confusion);
  report.equal_opportunity.value = eo_bias(report.confusion);
  report.demographic_parity.value = dp_bias(report.confusion);
  if (bootstrap) {
    report.equal_opportunity.interval = bootstrap_eo_ci(observations, *bootstrap);
    report.demographic_parity.interval = bootstrap_dp_ci(observations, *bootstrap);
  }
  return report;
}

}  // namespace selfbias
