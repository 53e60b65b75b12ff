#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "selfbias/corpus.hpp"
#include "selfbias/errors.hpp"
#include "selfbias/metrics.hpp"

namespace selfbias {

enum class Side { a, b };

inline const char* to_string(Side s) { return s == Side::a ? "a" : "b"; }

inline Side side_from_string(const std::string& s) {
  if (s == "a") return Side::a;
  if (s == "b") return Side::b;
  throw std::invalid_argument("unknown side: '" + s + "'");
}

/// Per-response perplexity of one side of a record, conditioned on the
/// shared prompt. Natural-log units per token; log-perplexity is the mean
/// NLL by definition, so it is exposed as an accessor rather than stored.
struct PerplexitySummary {
  std::string record_id;
  Side side = Side::a;
  std::string scorer_model;
  std::size_t token_count = 0;
  double mean_nll = 0.0;

  double log_ppl() const { return mean_nll; }
  double perplexity() const { return std::exp(mean_nll); }
};

/// -(1/N) * sum of token logprobs. Inputs must be finite and <= 0.
inline double mean_nll(const std::vector<double>& token_logprobs) {
  if (token_logprobs.empty()) throw std::invalid_argument("mean_nll over zero tokens");
  double sum = 0.0;
  for (double lp : token_logprobs) {
    if (!(lp <= 0.0) || std::isinf(lp))
      throw std::invalid_argument("token logprob must be a finite value <= 0");
    sum += lp;
  }
  return -sum / static_cast<double>(token_logprobs.size());
}

inline PerplexitySummary summarize_logprobs(std::string record_id, Side side,
                                            std::string scorer_model,
                                            const std::vector<double>& token_logprobs) {
  PerplexitySummary s;
  s.record_id = std::move(record_id);
  s.side = side;
  s.scorer_model = std::move(scorer_model);
  s.token_count = token_logprobs.size();
  s.mean_nll = mean_nll(token_logprobs);
  return s;
}

struct PerplexityDelta {
  std::string record_id;
  double delta = 0.0;  // log_ppl(A) - log_ppl(B)
};

struct DeltaSet {
  std::vector<PerplexityDelta> deltas;
  std::uint64_t n_missing_side = 0;
};

/// Pairs each record's two sides into a delta, in first-appearance order.
/// Records with only one side are dropped and counted. Duplicate
/// (record, side) rows or mixed scorer models within a record are input
/// errors.
inline DeltaSet compute_deltas(const std::vector<PerplexitySummary>& summaries) {
  struct Partial {
    std::optional<double> a, b;
    std::string scorer;
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, Partial> by_record;
  for (const PerplexitySummary& s : summaries) {
    auto [it, inserted] = by_record.try_emplace(s.record_id);
    if (inserted) {
      order.push_back(s.record_id);
      it->second.scorer = s.scorer_model;
    } else if (it->second.scorer != s.scorer_model) {
      throw std::invalid_argument("record '" + s.record_id + "' scored under two models ('" +
                                  it->second.scorer + "' and '" + s.scorer_model + "')");
    }
    std::optional<double>& slot = s.side == Side::a ? it->second.a : it->second.b;
    if (slot)
      throw std::invalid_argument("duplicate summary for record '" + s.record_id +
                                  "' side " + to_string(s.side));
    slot = s.log_ppl();
  }

  DeltaSet out;
  for (const std::string& id : order) {
    const Partial& p = by_record.at(id);
    if (p.a && p.b) {
      out.deltas.push_back({id, *p.a - *p.b});
    } else {
      ++out.n_missing_side;
    }
  }
  return out;
}

// -- binned win-rate curves ------------------------------------------------

enum class BinStrategy { equal_width, quantile };

inline const char* to_string(BinStrategy s) {
  return s == BinStrategy::equal_width ? "equal_width" : "quantile";
}

inline BinStrategy bin_strategy_from_string(const std::string& s) {
  if (s == "equal_width") return BinStrategy::equal_width;
  if (s == "quantile") return BinStrategy::quantile;
  throw std::invalid_argument("unknown bin strategy: '" + s + "'");
}

struct BinSpec {
  BinStrategy strategy = BinStrategy::quantile;
  std::size_t bin_count = 8;
  /// Deltas outside this closed range are dropped (and counted) before
  /// binning. Equal-width edges then span the clip range itself.
  std::optional<std::pair<double, double>> clip_range;
  /// Bins smaller than this report counts but no rate.
  std::size_t min_count_for_rate = 20;
};

struct BinSummary {
  std::size_t bin_index = 0;
  double low = 0.0;
  double high = 0.0;  // [low, high); the last bin also includes high
  std::size_t n = 0;
  std::size_t n_judge_a_wins = 0;
  std::size_t n_human_a_wins = 0;
  std::optional<double> judge_win_rate_a;
  std::optional<double> human_win_rate_a;
};

struct WinRateCurve {
  std::vector<double> edges;  // bin_count + 1
  std::vector<BinSummary> bins;
  std::size_t n_binned = 0;
  std::size_t n_clipped = 0;
  /// Fewer than two non-empty bins: the curve carries no trend information.
  bool degenerate = false;
};

/// One record's contribution to a curve: its delta plus both binary
/// verdicts. Ties must be excluded before this point.
struct CurveSample {
  std::string record_id;
  double delta = 0.0;
  bool judge_a_wins = false;
  bool human_a_wins = false;
};

namespace detail {

inline void validate_bin_spec(const BinSpec& spec) {
  if (spec.bin_count < 2) throw std::invalid_argument("bin_count must be at least 2");
  if (spec.clip_range && !(spec.clip_range->first < spec.clip_range->second))
    throw std::invalid_argument("clip range must satisfy low < high");
}

/// Monotone non-decreasing edge list over the kept deltas. Quantile edges
/// may repeat under heavy ties; the zero-width bins between repeats stay
/// empty.
inline std::vector<double> bin_edges(std::vector<double> values, const BinSpec& spec) {
  if (values.empty()) throw AnalysisError("no deltas left to bin");
  std::sort(values.begin(), values.end());
  std::vector<double> edges(spec.bin_count + 1);
  if (spec.strategy == BinStrategy::quantile) {
    for (std::size_t k = 0; k <= spec.bin_count; ++k)
      edges[k] = sorted_quantile(values, static_cast<double>(k) / static_cast<double>(spec.bin_count));
  } else {
    const double lo = spec.clip_range ? spec.clip_range->first : values.front();
    const double hi = spec.clip_range ? spec.clip_range->second : values.back();
    for (std::size_t k = 0; k <= spec.bin_count; ++k) {
      const double t = static_cast<double>(k) / static_cast<double>(spec.bin_count);
      edges[k] = lo + t * (hi - lo);
    }
    edges.back() = hi;  // guard against rounding drift at the top edge
  }
  return edges;
}

/// Index of the bin covering d: the last edge <= d. d equal to the top
/// edge falls in the last bin.
inline std::size_t bin_index(const std::vector<double>& edges, double d) {
  auto it = std::upper_bound(edges.begin(), edges.end(), d);
  if (it == edges.begin()) return 0;  // d == lowest edge after clipping
  std::size_t idx = static_cast<std::size_t>(it - edges.begin()) - 1;
  const std::size_t last = edges.size() - 2;
  return idx > last ? last : idx;
}

inline WinRateCurve fill_curve(const std::vector<CurveSample>& kept,
                               std::vector<double> edges, const BinSpec& spec,
                               std::size_t n_clipped) {
  WinRateCurve curve;
  curve.edges = std::move(edges);
  curve.n_clipped = n_clipped;
  curve.bins.resize(spec.bin_count);
  for (std::size_t k = 0; k < spec.bin_count; ++k) {
    curve.bins[k].bin_index = k;
    curve.bins[k].low = curve.edges[k];
    curve.bins[k].high = curve.edges[k + 1];
  }
  for (const CurveSample& s : kept) {
    BinSummary& bin = curve.bins[bin_index(curve.edges, s.delta)];
    ++bin.n;
    if (s.judge_a_wins) ++bin.n_judge_a_wins;
    if (s.human_a_wins) ++bin.n_human_a_wins;
  }
  std::size_t non_empty = 0;
  for (BinSummary& bin : curve.bins) {
    curve.n_binned += bin.n;
    if (bin.n == 0) continue;
    ++non_empty;
    if (bin.n >= std::max<std::size_t>(spec.min_count_for_rate, 1)) {
      bin.judge_win_rate_a = static_cast<double>(bin.n_judge_a_wins) / static_cast<double>(bin.n);
      bin.human_win_rate_a = static_cast<double>(bin.n_human_a_wins) / static_cast<double>(bin.n);
    }
  }
  curve.degenerate = non_empty < 2;
  return curve;
}

inline bool clipped_out(const BinSpec& spec, double d) {
  return spec.clip_range && (d < spec.clip_range->first || d > spec.clip_range->second);
}

}  // namespace detail

inline WinRateCurve win_rate_curve(const std::vector<CurveSample>& samples,
                                   const BinSpec& spec) {
  detail::validate_bin_spec(spec);
  std::vector<CurveSample> kept;
  kept.reserve(samples.size());
  std::size_t n_clipped = 0;
  for (const CurveSample& s : samples) {
    if (detail::clipped_out(spec, s.delta)) {
      ++n_clipped;
    } else {
      kept.push_back(s);
    }
  }
  std::vector<double> values;
  values.reserve(kept.size());
  for (const CurveSample& s : kept) values.push_back(s.delta);
  return detail::fill_curve(kept, detail::bin_edges(std::move(values), spec), spec, n_clipped);
}

/// Aligned-list form: deltas[i], judge_verdicts[i], human_labels[i] describe
/// the same record. Any tie is a caller error here — exclusion happens
/// upstream where the reasons are tallied.
inline WinRateCurve win_rate_curve(const std::vector<PerplexityDelta>& deltas,
                                   const std::vector<PairVerdict>& judge_verdicts,
                                   const std::vector<HumanLabel>& human_labels,
                                   const BinSpec& spec) {
  if (deltas.size() != judge_verdicts.size() || deltas.size() != human_labels.size())
    throw std::invalid_argument("deltas, verdicts, and labels must be aligned");
  std::vector<CurveSample> samples;
  samples.reserve(deltas.size());
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    if (judge_verdicts[i] == PairVerdict::judge_tie)
      throw std::invalid_argument("judge tie for record '" + deltas[i].record_id +
                                  "' must be excluded before binning");
    if (human_labels[i] != HumanLabel::a_wins && human_labels[i] != HumanLabel::b_wins)
      throw std::invalid_argument("human tie for record '" + deltas[i].record_id +
                                  "' must be excluded before binning");
    samples.push_back({deltas[i].record_id, deltas[i].delta,
                       judge_verdicts[i] == PairVerdict::a_wins,
                       human_labels[i] == HumanLabel::a_wins});
  }
  return win_rate_curve(samples, spec);
}

struct SelfSplitCurves {
  /// Records containing the judge's own response, oriented so that response
  /// sits in slot A (deltas and verdicts flipped where needed).
  WinRateCurve self;
  /// Records the judge had no hand in, unaltered.
  WinRateCurve other;
  std::uint64_t n_excluded_both_self = 0;
};

/// Splits the curve by whether the judge authored one of the responses.
/// Both groups share one set of bin edges (computed over the union of
/// oriented deltas) so the curves are directly comparable.
inline SelfSplitCurves split_curve_by_self(const std::vector<PerplexityDelta>& deltas,
                                           const std::vector<PairVerdict>& judge_verdicts,
                                           const std::vector<DialogueRecord>& records,
                                           const std::string& judge_model,
                                           const BinSpec& spec) {
  detail::validate_bin_spec(spec);
  if (deltas.size() != judge_verdicts.size())
    throw std::invalid_argument("deltas and verdicts must be aligned");
  if (judge_model.empty()) throw std::invalid_argument("judge model must be non-empty");
  std::unordered_map<std::string, const DialogueRecord*> by_id;
  for (const DialogueRecord& r : records) by_id[r.record_id] = &r;

  SelfSplitCurves out;
  std::vector<CurveSample> self_kept, other_kept;
  std::size_t self_clipped = 0, other_clipped = 0;
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    auto it = by_id.find(deltas[i].record_id);
    if (it == by_id.end())
      throw std::invalid_argument("no record for delta '" + deltas[i].record_id + "'");
    const DialogueRecord& rec = *it->second;
    if (judge_verdicts[i] == PairVerdict::judge_tie)
      throw std::invalid_argument("judge tie for record '" + rec.record_id +
                                  "' must be excluded before binning");
    if (rec.human_label != HumanLabel::a_wins && rec.human_label != HumanLabel::b_wins)
      throw std::invalid_argument("human tie for record '" + rec.record_id +
                                  "' must be excluded before binning");

    const bool self_a = rec.model_a == judge_model;
    const bool self_b = rec.model_b == judge_model;
    if (self_a && self_b) {
      ++out.n_excluded_both_self;
      continue;
    }
    CurveSample s{rec.record_id, deltas[i].delta,
                  judge_verdicts[i] == PairVerdict::a_wins,
                  rec.human_label == HumanLabel::a_wins};
    if (self_b) {  // mirror so the judge's response reads as slot A
      s.delta = -s.delta;
      s.judge_a_wins = !s.judge_a_wins;
      s.human_a_wins = !s.human_a_wins;
    }
    if (detail::clipped_out(spec, s.delta)) {
      ++(self_a || self_b ? self_clipped : other_clipped);
      continue;
    }
    (self_a || self_b ? self_kept : other_kept).push_back(std::move(s));
  }

  std::vector<double> all_values;
  all_values.reserve(self_kept.size() + other_kept.size());
  for (const CurveSample& s : self_kept) all_values.push_back(s.delta);
  for (const CurveSample& s : other_kept) all_values.push_back(s.delta);
  std::vector<double> edges = detail::bin_edges(std::move(all_values), spec);
  out.self = detail::fill_curve(self_kept, edges, spec, self_clipped);
  out.other = detail::fill_curve(other_kept, std::move(edges), spec, other_clipped);
  return out;
}

struct OriginMeans {
  double mean_self = 0.0;
  double mean_other = 0.0;
  std::uint64_t n_self = 0;
  std::uint64_t n_other = 0;
};

/// Mean log-perplexity of responses the judge wrote vs responses written by
/// other models. Origin is read off the record's model names.
inline OriginMeans mean_log_ppl_by_origin(const std::vector<PerplexitySummary>& summaries,
                                          const std::vector<DialogueRecord>& records,
                                          const std::string& judge_model) {
  if (judge_model.empty()) throw std::invalid_argument("judge model must be non-empty");
  std::unordered_map<std::string, const DialogueRecord*> by_id;
  for (const DialogueRecord& r : records) by_id[r.record_id] = &r;

  OriginMeans out;
  double sum_self = 0.0, sum_other = 0.0;
  for (const PerplexitySummary& s : summaries) {
    auto it = by_id.find(s.record_id);
    if (it == by_id.end())
      throw std::invalid_argument("no record for summary '" + s.record_id + "'");
    const std::string& origin =
        s.side == Side::a ? it->second->model_a : it->second->model_b;
    if (origin == judge_model) {
      sum_self += s.log_ppl();
      ++out.n_self;
    } else {
      sum_other += s.log_ppl();
      ++out.n_other;
    }
  }
  if (out.n_self == 0) throw AnalysisError("no responses written by the judge itself");
  if (out.n_other == 0) throw AnalysisError("no responses written by other models");
  out.mean_self = sum_self / static_cast<double>(out.n_self);
  out.mean_other = sum_other / static_cast<double>(out.n_other);
  return out;
}

// -- precomputed-NLL file ----------------------------------------------------

inline nlohmann::ordered_json summary_to_json(const PerplexitySummary& s) {
  return nlohmann::ordered_json{{"record_id", s.record_id},
                                {"side", to_string(s.side)},
                                {"scorer_model", s.scorer_model},
                                {"token_count", s.token_count},
                                {"mean_nll", s.mean_nll}};
}

inline PerplexitySummary summary_from_json(const nlohmann::json& j) {
  PerplexitySummary s;
  try {
    s.record_id = j.at("record_id").get<std::string>();
    s.side = side_from_string(j.at("side").get<std::string>());
    s.scorer_model = j.at("scorer_model").get<std::string>();
    s.token_count = j.at("token_count").get<std::size_t>();
    s.mean_nll = j.at("mean_nll").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("bad perplexity summary shape: ") + e.what());
  }
  if (s.record_id.empty()) throw std::invalid_argument("empty record_id");
  if (s.token_count < 1) throw std::invalid_argument("token_count must be at least 1");
  if (!(s.mean_nll >= 0.0) || std::isinf(s.mean_nll))
    throw std::invalid_argument("mean_nll must be finite and non-negative");
  return s;
}

inline void write_nll_stream(std::ostream& out, const std::vector<PerplexitySummary>& summaries) {
  for (const PerplexitySummary& s : summaries) out << summary_to_json(s).dump() << '\n';
}

inline void write_nll_file(const std::filesystem::path& path,
                           const std::vector<PerplexitySummary>& summaries) {
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot open for writing: " + path.string());
  write_nll_stream(out, summaries);
  if (!out.good()) throw CorpusError("write failed: " + path.string());
}

inline std::vector<PerplexitySummary> read_nll_stream(std::istream& in) {
  std::vector<PerplexitySummary> out;
  std::map<std::pair<std::string, std::string>, bool> seen;  // (record_id, side)
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (is_blank(line)) continue;
    PerplexitySummary s;
    try {
      s = summary_from_json(nlohmann::json::parse(line));
    } catch (const std::exception& e) {
      throw CorpusError("nll line " + std::to_string(line_number) + ": " + e.what());
    }
    if (!seen.emplace(std::make_pair(s.record_id, std::string(to_string(s.side))), true).second)
      throw CorpusError("nll line " + std::to_string(line_number) + ": duplicate entry for record '" +
                        s.record_id + "' side " + to_string(s.side));
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<PerplexitySummary> read_nll_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open nll file: " + path.string());
  return read_nll_stream(in);
}

}  // namespace selfbias
