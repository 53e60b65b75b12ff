#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "selfbias/corpus.hpp"
#include "selfbias/errors.hpp"
#include "selfbias/metrics.hpp"
#include "selfbias/perplexity.hpp"
#include "selfbias/report.hpp"
#include "selfbias/simulation.hpp"
#include "selfbias/transport.hpp"

namespace selfbias {

struct CorpusConfig {
  std::string path;
  CorpusFormat format = CorpusFormat::canonical;
};

/// Resolved settings for the judge / metrics / perplexity commands.
/// config_hash fingerprints the raw file bytes for the report stamp.
struct AuditConfig {
  CorpusConfig corpus;
  std::string judge_model;
  std::optional<EndpointConfig> judge_endpoint;
  std::optional<EndpointConfig> scoring_endpoint;
  std::optional<std::string> precomputed_nll;
  double threshold = 0.5;
  BinSpec bins;
  std::optional<BootstrapConfig> bootstrap = BootstrapConfig{};
  std::string output_dir = ".";
  std::optional<std::string> cache_path;
  std::size_t max_concurrency = 4;
  double temperature = 0.0;
  int top_logprobs = 5;
  std::optional<std::string> prompt_template_path;
  std::string config_hash;

  std::filesystem::path verdict_cache_path() const {
    if (cache_path) return *cache_path;
    return std::filesystem::path(output_dir) / "verdicts.jsonl";
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j,
                                std::initializer_list<const char*> known,
                                const std::string& where) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || item.key() == k;
    if (!ok) throw ConfigError("unknown key '" + item.key() + "' in " + where);
  }
}

inline EndpointConfig endpoint_from_json(const nlohmann::json& j, const std::string& where) {
  reject_unknown_keys(j,
                      {"base_url", "api_key_env", "timeout_s", "max_attempts",
                       "initial_backoff_ms", "max_backoff_ms"},
                      where);
  EndpointConfig e;
  e.base_url = j.at("base_url").get<std::string>();
  if (e.base_url.empty()) throw ConfigError(where + ".base_url must be non-empty");
  e.api_key_env = j.value("api_key_env", e.api_key_env);
  e.timeout = std::chrono::seconds(j.value("timeout_s", 60));
  e.retry.max_attempts = j.value("max_attempts", e.retry.max_attempts);
  e.retry.initial_backoff = std::chrono::milliseconds(j.value("initial_backoff_ms", 250));
  e.retry.max_backoff = std::chrono::milliseconds(j.value("max_backoff_ms", 4000));
  return e;
}

inline BinSpec bins_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"strategy", "bin_count", "clip", "min_count_for_rate"}, "bins");
  BinSpec bins;
  if (j.contains("strategy")) bins.strategy = bin_strategy_from_string(j.at("strategy").get<std::string>());
  bins.bin_count = j.value("bin_count", bins.bin_count);
  if (bins.bin_count < 2) throw ConfigError("bins.bin_count must be at least 2");
  if (j.contains("clip") && !j.at("clip").is_null()) {
    const nlohmann::json& clip = j.at("clip");
    if (!clip.is_array() || clip.size() != 2) throw ConfigError("bins.clip must be [low, high]");
    bins.clip_range = std::make_pair(clip.at(0).get<double>(), clip.at(1).get<double>());
    if (!(bins.clip_range->first < bins.clip_range->second))
      throw ConfigError("bins.clip must satisfy low < high");
  }
  bins.min_count_for_rate = j.value("min_count_for_rate", bins.min_count_for_rate);
  return bins;
}

inline std::optional<BootstrapConfig> bootstrap_from_json(const nlohmann::json& j) {
  if (j.is_null() || (j.is_boolean() && !j.get<bool>())) return std::nullopt;
  if (!j.is_object()) throw ConfigError("bootstrap must be an object, null, or false");
  reject_unknown_keys(j, {"resamples", "level", "seed", "max_redraws"}, "bootstrap");
  BootstrapConfig b;
  b.n_resamples = j.value("resamples", b.n_resamples);
  b.confidence = j.value("level", b.confidence);
  b.seed = j.value("seed", b.seed);
  b.max_redraws = j.value("max_redraws", b.max_redraws);
  if (b.n_resamples < 100) throw ConfigError("bootstrap.resamples must be at least 100");
  if (!(b.confidence > 0.0 && b.confidence < 1.0))
    throw ConfigError("bootstrap.level must lie in (0, 1)");
  return b;
}

inline nlohmann::json parse_config_file(const std::string& path, std::string* raw_out) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (raw_out) *raw_out = raw;
  try {
    return nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

}  // namespace detail

inline AuditConfig load_audit_config(const std::string& path) {
  std::string raw;
  const nlohmann::json j = detail::parse_config_file(path, &raw);
  if (!j.is_object()) throw ConfigError("config root must be an object");
  detail::reject_unknown_keys(
      j,
      {"corpus", "judge_model", "endpoint", "scoring_endpoint", "precomputed_nll", "threshold",
       "bins", "bootstrap", "output_dir", "cache_path", "max_concurrency", "temperature",
       "top_logprobs", "prompt_template"},
      "config");
  AuditConfig cfg;
  cfg.config_hash = fnv1a64_hex(raw);
  try {
    const nlohmann::json& corpus = j.at("corpus");
    detail::reject_unknown_keys(corpus, {"path", "format"}, "corpus");
    cfg.corpus.path = corpus.at("path").get<std::string>();
    const std::string format = corpus.value("format", std::string("canonical"));
    if (format == "canonical") cfg.corpus.format = CorpusFormat::canonical;
    else if (format == "chatbot_arena") cfg.corpus.format = CorpusFormat::chatbot_arena;
    else throw ConfigError("corpus.format must be canonical or chatbot_arena");

    cfg.judge_model = j.at("judge_model").get<std::string>();
    if (cfg.judge_model.empty()) throw ConfigError("judge_model must be non-empty");

    if (j.contains("endpoint") && !j.at("endpoint").is_null())
      cfg.judge_endpoint = detail::endpoint_from_json(j.at("endpoint"), "endpoint");
    if (j.contains("scoring_endpoint") && !j.at("scoring_endpoint").is_null())
      cfg.scoring_endpoint = detail::endpoint_from_json(j.at("scoring_endpoint"), "scoring_endpoint");
    if (j.contains("precomputed_nll") && !j.at("precomputed_nll").is_null())
      cfg.precomputed_nll = j.at("precomputed_nll").get<std::string>();

    cfg.threshold = j.value("threshold", cfg.threshold);
    if (!(cfg.threshold > 0.0 && cfg.threshold < 1.0))
      throw ConfigError("threshold must lie in (0, 1)");
    if (j.contains("bins")) cfg.bins = detail::bins_from_json(j.at("bins"));
    if (j.contains("bootstrap")) cfg.bootstrap = detail::bootstrap_from_json(j.at("bootstrap"));
    cfg.output_dir = j.value("output_dir", cfg.output_dir);
    if (j.contains("cache_path") && !j.at("cache_path").is_null())
      cfg.cache_path = j.at("cache_path").get<std::string>();
    cfg.max_concurrency = j.value("max_concurrency", cfg.max_concurrency);
    if (cfg.max_concurrency < 1) throw ConfigError("max_concurrency must be at least 1");
    cfg.temperature = j.value("temperature", cfg.temperature);
    cfg.top_logprobs = j.value("top_logprobs", cfg.top_logprobs);
    if (cfg.top_logprobs < 2) throw ConfigError("top_logprobs must be at least 2");
    if (j.contains("prompt_template") && !j.at("prompt_template").is_null())
      cfg.prompt_template_path = j.at("prompt_template").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  if (!std::filesystem::exists(cfg.corpus.path))
    throw ConfigError("corpus file does not exist: " + cfg.corpus.path);
  if (cfg.precomputed_nll && !std::filesystem::exists(*cfg.precomputed_nll))
    throw ConfigError("precomputed NLL file does not exist: " + *cfg.precomputed_nll);
  if (cfg.prompt_template_path && !std::filesystem::exists(*cfg.prompt_template_path))
    throw ConfigError("prompt template does not exist: " + *cfg.prompt_template_path);
  return cfg;
}

// -- simulation scenarios -----------------------------------------------------

struct ScenarioConfig {
  enum class Kind { judge, perplexity_world };
  Kind kind = Kind::judge;
  SyntheticJudgeConfig judge;
  std::string judge_model = "sim-judge";
  std::string other_model = "sim-rival";
  PerplexityWorldConfig world;
  BinSpec bins;
  std::string config_hash;
};

inline ScenarioConfig load_scenario_config(const std::string& path) {
  std::string raw;
  const nlohmann::json j = detail::parse_config_file(path, &raw);
  if (!j.is_object()) throw ConfigError("scenario root must be an object");
  detail::reject_unknown_keys(j, {"kind", "judge", "judge_model", "other_model", "world", "bins"},
                              "scenario");
  ScenarioConfig cfg;
  cfg.config_hash = fnv1a64_hex(raw);
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "judge") cfg.kind = ScenarioConfig::Kind::judge;
    else if (kind == "perplexity_world") cfg.kind = ScenarioConfig::Kind::perplexity_world;
    else throw ConfigError("scenario kind must be judge or perplexity_world");

    if (cfg.kind == ScenarioConfig::Kind::judge) {
      const nlohmann::json& sj = j.at("judge");
      detail::reject_unknown_keys(sj, {"t1", "t0", "p_human_self", "n", "seed"}, "judge");
      cfg.judge.t1 = sj.at("t1").get<double>();
      cfg.judge.t0 = sj.at("t0").get<double>();
      cfg.judge.p_human_self = sj.value("p_human_self", cfg.judge.p_human_self);
      cfg.judge.n = sj.at("n").get<std::size_t>();
      cfg.judge.seed = sj.value("seed", cfg.judge.seed);
      cfg.judge_model = j.value("judge_model", cfg.judge_model);
      cfg.other_model = j.value("other_model", cfg.other_model);
      validate(cfg.judge);
    } else {
      const nlohmann::json& wj = j.at("world");
      detail::reject_unknown_keys(wj,
                                  {"w_judge", "w_human", "self_bonus", "delta", "p_self_pair",
                                   "judge_model", "rival_model_a", "rival_model_b", "n", "seed"},
                                  "world");
      cfg.world.w_judge = wj.at("w_judge").get<double>();
      cfg.world.w_human = wj.at("w_human").get<double>();
      cfg.world.self_bonus = wj.value("self_bonus", 0.0);
      if (wj.contains("delta")) {
        const nlohmann::json& dj = wj.at("delta");
        detail::reject_unknown_keys(dj, {"family", "center", "spread"}, "world.delta");
        cfg.world.delta_distribution.family =
            delta_family_from_string(dj.value("family", std::string("uniform")));
        cfg.world.delta_distribution.center = dj.value("center", 0.0);
        cfg.world.delta_distribution.spread = dj.value("spread", 1.0);
      }
      cfg.world.p_self_pair = wj.value("p_self_pair", cfg.world.p_self_pair);
      cfg.world.judge_model = wj.value("judge_model", cfg.world.judge_model);
      cfg.world.rival_model_a = wj.value("rival_model_a", cfg.world.rival_model_a);
      cfg.world.rival_model_b = wj.value("rival_model_b", cfg.world.rival_model_b);
      cfg.world.n = wj.at("n").get<std::size_t>();
      cfg.world.seed = wj.value("seed", cfg.world.seed);
      validate(cfg.world);
      if (j.contains("bins")) cfg.bins = detail::bins_from_json(j.at("bins"));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("scenario file " + path + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError("scenario file " + path + ": " + e.what());
  }
  return cfg;
}

}  // namespace selfbias
