#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include <selfbias/selfbias.hpp>

namespace fs = std::filesystem;
using namespace selfbias;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUnexpected = 1;
constexpr int kExitConfig = 2;
constexpr int kExitTransport = 3;
constexpr int kExitData = 4;
constexpr int kExitAnalysis = 5;

struct GlobalFlags {
  std::string config_path;
  std::optional<std::string> output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_concurrency;
};

void apply_overrides(AuditConfig& cfg, const GlobalFlags& flags) {
  if (flags.output_dir) cfg.output_dir = *flags.output_dir;
  if (flags.max_concurrency) cfg.max_concurrency = *flags.max_concurrency;
  if (flags.seed && cfg.bootstrap) cfg.bootstrap->seed = *flags.seed;
}

PromptTemplate resolve_template(const AuditConfig& cfg) {
  if (cfg.prompt_template_path) return load_prompt_template(*cfg.prompt_template_path);
  return default_prompt_template();
}

void log_rejections(const ParseReport& parsed) {
  if (parsed.rejections.empty()) return;
  std::cerr << "note: rejected " << parsed.rejections.size() << " corpus line(s); first: line "
            << parsed.rejections.front().line_number << ": " << parsed.rejections.front().reason
            << "\n";
}

/// Index-preserving parallel map over [0, n) with bounded workers; the
/// first exception wins and is rethrown after the pool drains.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t max_concurrency, Fn&& fn) {
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n || failed.load()) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        failed.store(true);
        return;
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(max_concurrency, n));
  std::vector<std::thread> threads;
  threads.reserve(n_threads);
  for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
  for (std::thread& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

int cmd_judge(const GlobalFlags& flags) {
  AuditConfig cfg = load_audit_config(flags.config_path);
  apply_overrides(cfg, flags);
  if (!cfg.judge_endpoint)
    throw ConfigError("the judge command needs an 'endpoint' entry in the config");
  fs::create_directories(cfg.output_dir);

  const ParseReport parsed = parse_corpus(cfg.corpus.path, cfg.corpus.format);
  log_rejections(parsed);
  const PromptTemplate tmpl = resolve_template(cfg);

  HttpChatClient client(*cfg.judge_endpoint);
  VerdictCache cache(cfg.verdict_cache_path());
  EvaluatorConfig evaluator_config;
  evaluator_config.judge_model = cfg.judge_model;
  evaluator_config.prompt = tmpl;
  evaluator_config.temperature = cfg.temperature;
  evaluator_config.top_logprobs = cfg.top_logprobs;
  evaluator_config.max_concurrency = cfg.max_concurrency;
  JudgeEvaluator evaluator(client, cache, evaluator_config);

  JudgeEvaluator::Progress progress;
  const std::vector<JudgeScore> scores = evaluator.evaluate_corpus(parsed.corpus.records, &progress);
  std::size_t malformed = 0;
  for (const JudgeScore& s : scores)
    if (s.status == ScoreStatus::malformed) ++malformed;

  std::cout << "judged " << scores.size() << " record(s): " << progress.n_cached
            << " from cache, " << progress.n_requested << " request(s), " << malformed
            << " malformed\n"
            << "verdict cache: " << cache.path().string() << "\n";
  return kExitOk;
}

int cmd_metrics(const GlobalFlags& flags) {
  AuditConfig cfg = load_audit_config(flags.config_path);
  apply_overrides(cfg, flags);
  fs::create_directories(cfg.output_dir);

  const ParseReport parsed = parse_corpus(cfg.corpus.path, cfg.corpus.format);
  log_rejections(parsed);
  const PromptTemplate tmpl = resolve_template(cfg);
  VerdictCache cache(cfg.verdict_cache_path());

  const SelfPairSelection selection = select_self_pairs(parsed.corpus, cfg.judge_model);
  std::vector<SelfPairObservation> observations;
  ExclusionTally tally;
  std::size_t missing = 0;
  for (const DialogueRecord& rec : selection.selected) {
    const auto score = cache.lookup(rec.record_id, cfg.judge_model, tmpl.version);
    if (!score) {
      ++missing;
      continue;
    }
    const OrientOutcome outcome = orient_observation(rec, cfg.judge_model, *score, cfg.threshold);
    if (outcome.observation)
      observations.push_back(*outcome.observation);
    else
      tally.add(*outcome.exclusion);
  }
  if (missing > 0)
    throw CorpusError(std::to_string(missing) +
                      " self-pair record(s) lack cached verdicts; run the judge command first");

  BiasReport report = compute_bias_report(observations, cfg.judge_model, cfg.bootstrap);
  report.n_self_pairs = selection.selected.size();
  report.n_excluded_no_self = selection.n_excluded_no_self;
  report.n_excluded_both_self = selection.n_excluded_both_self;
  report.exclusions = tally;

  ReportStamp stamp;
  stamp.prompt_template_version = tmpl.version;
  stamp.config_hash = cfg.config_hash;
  const fs::path report_path = fs::path(cfg.output_dir) / "bias_report.json";
  const fs::path table_path = fs::path(cfg.output_dir) / "bias_table.tsv";
  atomic_write_text(report_path, bias_report_file_json({report}, stamp).dump(2) + "\n");
  atomic_write_text(table_path, bias_table_header() + bias_table_row(report));

  std::cout << "judge_model: " << report.judge_model << "\n"
            << "eo_bias: " << detail::fmt_double(report.equal_opportunity.value) << "\n"
            << "dp_bias: " << detail::fmt_double(report.demographic_parity.value) << "\n"
            << "recall_self: " << detail::fmt_double(report.recall_when_human_prefers_self) << "\n"
            << "recall_other: " << detail::fmt_double(report.recall_when_human_prefers_other) << "\n"
            << "observations: " << report.n_observations << " (ties excluded: "
            << tally.human_tie + tally.judge_tie << ", malformed excluded: " << tally.judge_malformed
            << ")\n"
            << "report: " << report_path.string() << "\n";
  return kExitOk;
}

int cmd_perplexity(const GlobalFlags& flags) {
  AuditConfig cfg = load_audit_config(flags.config_path);
  apply_overrides(cfg, flags);
  const bool live = cfg.scoring_endpoint.has_value();
  const bool precomputed = cfg.precomputed_nll.has_value();
  if (live == precomputed)
    throw ConfigError("the perplexity command needs exactly one of 'scoring_endpoint' and "
                      "'precomputed_nll'");
  fs::create_directories(cfg.output_dir);

  const ParseReport parsed = parse_corpus(cfg.corpus.path, cfg.corpus.format);
  log_rejections(parsed);
  const std::vector<DialogueRecord>& records = parsed.corpus.records;
  const PromptTemplate tmpl = resolve_template(cfg);
  VerdictCache cache(cfg.verdict_cache_path());

  std::vector<PerplexitySummary> summaries;
  if (precomputed) {
    summaries = read_nll_file(*cfg.precomputed_nll);
  } else {
    HttpScoringClient scorer(*cfg.scoring_endpoint);
    summaries.resize(records.size() * 2);
    parallel_for(records.size() * 2, cfg.max_concurrency, [&](std::size_t i) {
      const DialogueRecord& rec = records[i / 2];
      const Side side = i % 2 == 0 ? Side::a : Side::b;
      summaries[i] = summarize_response(rec, side, scorer, cfg.judge_model);
    });
    std::ostringstream nll_text;
    write_nll_stream(nll_text, summaries);
    atomic_write_text(fs::path(cfg.output_dir) / "nll.jsonl", nll_text.str());
  }

  // Join deltas with cached verdicts and human labels; ties and malformed
  // scores drop out here, with counts.
  std::unordered_map<std::string, const DialogueRecord*> by_id;
  for (const DialogueRecord& r : records) by_id[r.record_id] = &r;
  const DeltaSet delta_set = compute_deltas(summaries);
  std::vector<PerplexityDelta> deltas;
  std::vector<PairVerdict> verdicts;
  std::vector<HumanLabel> labels;
  std::size_t missing = 0, unmatched = 0;
  ExclusionTally tally;
  for (const PerplexityDelta& d : delta_set.deltas) {
    const auto rec_it = by_id.find(d.record_id);
    if (rec_it == by_id.end()) {
      ++unmatched;
      continue;
    }
    const auto score = cache.lookup(d.record_id, cfg.judge_model, tmpl.version);
    if (!score) {
      ++missing;
      continue;
    }
    if (score->status != ScoreStatus::ok) {
      tally.add(ExclusionReason::judge_malformed);
      continue;
    }
    const PairVerdict verdict = binarize_verdict(*score, cfg.threshold);
    if (verdict == PairVerdict::judge_tie) {
      tally.add(ExclusionReason::judge_tie);
      continue;
    }
    const HumanLabel label = rec_it->second->human_label;
    if (label != HumanLabel::a_wins && label != HumanLabel::b_wins) {
      tally.add(ExclusionReason::human_tie);
      continue;
    }
    deltas.push_back(d);
    verdicts.push_back(verdict);
    labels.push_back(label);
  }
  if (unmatched > 0)
    std::cerr << "note: " << unmatched << " NLL record(s) have no corpus entry; skipped\n";
  if (missing > 0)
    throw CorpusError(std::to_string(missing) +
                      " record(s) lack cached verdicts; run the judge command first");
  if (deltas.empty()) throw AnalysisError("no records usable for the perplexity analysis");

  const WinRateCurve all = win_rate_curve(deltas, verdicts, labels, cfg.bins);
  if (all.degenerate) std::cerr << "warning: overall curve has fewer than two non-empty bins\n";
  atomic_write_text(fs::path(cfg.output_dir) / "curve_overall.tsv", curve_table(all, "all"));

  const SelfSplitCurves split =
      split_curve_by_self(deltas, verdicts, records, cfg.judge_model, cfg.bins);
  if (split.self.degenerate || split.other.degenerate)
    std::cerr << "warning: a split curve has fewer than two non-empty bins\n";
  std::string split_text = curve_table_header();
  append_curve_rows(split_text, split.self, "self");
  append_curve_rows(split_text, split.other, "other");
  atomic_write_text(fs::path(cfg.output_dir) / "curve_by_self.tsv", split_text);

  std::vector<PerplexitySummary> matched;
  matched.reserve(summaries.size());
  for (const PerplexitySummary& s : summaries)
    if (by_id.count(s.record_id)) matched.push_back(s);
  const OriginMeans means = mean_log_ppl_by_origin(matched, records, cfg.judge_model);
  atomic_write_text(fs::path(cfg.output_dir) / "log_ppl_by_origin.tsv", origin_means_table(means));

  std::cout << "binned " << all.n_binned << " record(s) (" << all.n_clipped << " clipped, "
            << tally.total() << " excluded, " << delta_set.n_missing_side << " missing a side)\n"
            << "mean log-perplexity: self " << detail::fmt_double(means.mean_self) << ", other "
            << detail::fmt_double(means.mean_other) << "\n"
            << "tables: curve_overall.tsv curve_by_self.tsv log_ppl_by_origin.tsv in "
            << cfg.output_dir << "\n";
  return kExitOk;
}

nlohmann::ordered_json world_oracle_bins(const ScenarioConfig& scenario,
                                         const std::vector<PerplexityDelta>& realized) {
  const PerplexityWorldConfig& w = scenario.world;
  std::vector<double> values;
  values.reserve(realized.size());
  for (const PerplexityDelta& d : realized) values.push_back(d.delta);
  const std::vector<double> edges = detail::bin_edges(std::move(values), scenario.bins);
  const bool symmetric = w.delta_distribution.center == 0.0;

  nlohmann::ordered_json bins = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k + 1 < edges.size(); ++k) {
    const double lo = edges[k];
    const double hi = edges[k + 1];
    nlohmann::ordered_json bin{{"bin_index", k}, {"low", lo}, {"high", hi}};
    if (lo < hi) {
      const DeltaDistribution& dist = w.delta_distribution;
      const double e_plus = expected_win_rate_in_bin(w.w_judge, w.self_bonus, lo, hi, dist);
      const double e_minus = expected_win_rate_in_bin(w.w_judge, -w.self_bonus, lo, hi, dist);
      const double e_zero = expected_win_rate_in_bin(w.w_judge, 0.0, lo, hi, dist);
      bin["expected_judge_rate"] =
          w.p_self_pair * 0.5 * (e_plus + e_minus) + (1.0 - w.p_self_pair) * e_zero;
      bin["expected_human_rate"] = expected_win_rate_in_bin(w.w_human, 0.0, lo, hi, dist);
      // The oriented self curve mirrors half its records; only a symmetric,
      // zero-centered delta family keeps its oracle in closed form.
      if (symmetric) {
        bin["expected_self_rate"] = e_plus;
        bin["expected_other_rate"] = e_zero;
      }
    }
    bins.push_back(std::move(bin));
  }
  return bins;
}

int cmd_simulate(const GlobalFlags& flags) {
  ScenarioConfig scenario = load_scenario_config(flags.config_path);
  const std::string output_dir = flags.output_dir.value_or(".");
  if (flags.seed) {
    scenario.judge.seed = *flags.seed;
    scenario.world.seed = *flags.seed;
  }
  fs::create_directories(output_dir);

  Corpus corpus;
  std::vector<JudgeScore> scores;
  nlohmann::ordered_json oracle{{"toolkit_version", kToolkitVersion},
                                {"config_hash", scenario.config_hash}};

  if (scenario.kind == ScenarioConfig::Kind::judge) {
    JudgeWorld world = generate_judge_world(scenario.judge, scenario.judge_model, scenario.other_model);
    corpus.records = std::move(world.records);
    corpus.provenance = "synthetic-judge";
    scores = std::move(world.scores);
    oracle["kind"] = "judge";
    oracle["judge_model"] = scenario.judge_model;
    oracle["n"] = scenario.judge.n;
    oracle["seed"] = scenario.judge.seed;
    oracle["expected_eo_bias"] = expected_eo_bias(scenario.judge);
    oracle["expected_dp_bias"] = expected_dp_bias(scenario.judge);
  } else {
    PerplexityWorld world = generate_perplexity_world(scenario.world);
    corpus.records = std::move(world.records);
    corpus.provenance = "synthetic-perplexity-world";
    scores = std::move(world.scores);
    std::ostringstream nll_text;
    write_nll_stream(nll_text, world.summaries);
    atomic_write_text(fs::path(output_dir) / "nll.jsonl", nll_text.str());
    oracle["kind"] = "perplexity_world";
    oracle["judge_model"] = scenario.world.judge_model;
    oracle["n"] = scenario.world.n;
    oracle["seed"] = scenario.world.seed;
    oracle["bins"] = world_oracle_bins(scenario, world.deltas);
  }

  std::ostringstream corpus_text;
  write_corpus(corpus_text, corpus);
  atomic_write_text(fs::path(output_dir) / "corpus.jsonl", corpus_text.str());

  std::string verdict_text;
  for (const JudgeScore& s : scores) verdict_text += score_to_json(s).dump() + "\n";
  atomic_write_text(fs::path(output_dir) / "verdicts.jsonl", verdict_text);
  atomic_write_text(fs::path(output_dir) / "oracle.json", oracle.dump(2) + "\n");

  std::cout << "wrote " << corpus.records.size() << " synthetic record(s) to " << output_dir
            << " (corpus.jsonl, verdicts.jsonl"
            << (scenario.kind == ScenarioConfig::Kind::perplexity_world ? ", nll.jsonl" : "")
            << ", oracle.json)\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantify self-preference bias of pairwise LLM judges"};
  app.fallthrough();
  GlobalFlags flags;
  app.add_option("--config", flags.config_path, "Path to the config (or scenario) JSON file")
      ->required();
  app.add_option("--output-dir", flags.output_dir, "Directory for output files");
  app.add_option("--seed", flags.seed, "Override the configured random seed");
  app.add_option("--max-concurrency", flags.max_concurrency, "Override request concurrency");

  CLI::App* judge = app.add_subcommand("judge", "Judge every record and fill the verdict cache");
  CLI::App* metrics = app.add_subcommand("metrics", "Compute bias metrics from cached verdicts");
  CLI::App* perplexity =
      app.add_subcommand("perplexity", "Bin judge win rates by log-perplexity difference");
  CLI::App* simulate =
      app.add_subcommand("simulate", "Generate a synthetic world with a ground-truth manifest");
  for (CLI::App* sub : {judge, metrics, perplexity, simulate}) sub->fallthrough();
  app.require_subcommand(1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (judge->parsed()) return cmd_judge(flags);
    if (metrics->parsed()) return cmd_metrics(flags);
    if (perplexity->parsed()) return cmd_perplexity(flags);
    if (simulate->parsed()) return cmd_simulate(flags);
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const AuthError& e) {
    std::cerr << "auth error: " << e.what() << "\n";
    return kExitTransport;
  } catch (const TransportError& e) {
    std::cerr << "transport error: " << e.what() << "\n";
    return kExitTransport;
  } catch (const CapabilityError& e) {
    std::cerr << "capability error: " << e.what() << "\n";
    return kExitTransport;
  } catch (const CorpusError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const AlignmentError& e) {
    std::cerr << "alignment error: " << e.what() << "\n";
    return kExitAnalysis;
  } catch (const AnalysisError& e) {
    std::cerr << "analysis error: " << e.what() << "\n";
    return kExitAnalysis;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUnexpected;
  }
}
