#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "selfbias/metrics.hpp"
#include "selfbias/perplexity.hpp"
#include "selfbias/prompt.hpp"
#include "selfbias/version.hpp"

namespace selfbias {

/// FNV-1a over the canonical byte form of whatever is being stamped.
inline std::string fnv1a64_hex(const std::string& data) {
  std::uint64_t hash = 1469598103934665603ULL;
  for (unsigned char c : data) {
    hash ^= c;
    hash *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
  return buf;
}

/// Reproducibility header carried by every report file.
struct ReportStamp {
  std::string toolkit_version = kToolkitVersion;
  std::string prompt_template_version = kPromptTemplateVersion;
  std::string config_hash;
};

inline nlohmann::ordered_json stamp_to_json(const ReportStamp& stamp) {
  return nlohmann::ordered_json{{"toolkit_version", stamp.toolkit_version},
                                {"prompt_template_version", stamp.prompt_template_version},
                                {"config_hash", stamp.config_hash}};
}

namespace detail {

/// Shortest round-trip decimal form; non-finite values print as "nan" so
/// the tables stay loadable by numeric parsers.
inline std::string fmt_double(double v) {
  if (!std::isfinite(v)) return "nan";
  return nlohmann::json(v).dump();
}

inline std::string fmt_rate(const std::optional<double>& v) {
  return v ? fmt_double(*v) : "nan";
}

}  // namespace detail

inline nlohmann::ordered_json interval_to_json(const BootstrapInterval& ci) {
  return nlohmann::ordered_json{{"lower", ci.low},
                                {"upper", ci.high},
                                {"level", ci.confidence},
                                {"resamples", ci.n_resamples},
                                {"seed", ci.seed},
                                {"redraws", ci.n_redraws}};
}

inline nlohmann::ordered_json bias_report_to_json(const BiasReport& report) {
  nlohmann::ordered_json j{
      {"judge_model", report.judge_model},
      {"eo_bias", report.equal_opportunity.value},
      {"dp_bias", report.demographic_parity.value},
      {"recall_self", report.recall_when_human_prefers_self},
      {"recall_other", report.recall_when_human_prefers_other},
      {"counts",
       {{"n11", report.confusion.n11},
        {"n10", report.confusion.n10},
        {"n01", report.confusion.n01},
        {"n00", report.confusion.n00}}},
      {"n_observations", report.n_observations},
      {"n_self_pairs", report.n_self_pairs},
      {"n_excluded_no_self", report.n_excluded_no_self},
      {"n_excluded_both_self", report.n_excluded_both_self},
      {"n_excluded_ties", report.exclusions.human_tie + report.exclusions.judge_tie},
      {"n_excluded_human_tie", report.exclusions.human_tie},
      {"n_excluded_judge_tie", report.exclusions.judge_tie},
      {"n_excluded_malformed", report.exclusions.judge_malformed}};
  if (report.equal_opportunity.interval)
    j["eo_ci"] = interval_to_json(*report.equal_opportunity.interval);
  if (report.demographic_parity.interval)
    j["dp_ci"] = interval_to_json(*report.demographic_parity.interval);
  return j;
}

inline nlohmann::ordered_json bias_report_file_json(const std::vector<BiasReport>& reports,
                                                    const ReportStamp& stamp) {
  nlohmann::ordered_json j = stamp_to_json(stamp);
  nlohmann::ordered_json judges = nlohmann::ordered_json::array();
  for (const BiasReport& r : reports) judges.push_back(bias_report_to_json(r));
  j["judges"] = std::move(judges);
  return j;
}

// -- flat tables (tab-separated, one header line) ----------------------------

inline std::string bias_table_header() {
  return "judge_model\teo_bias\teo_ci_lower\teo_ci_upper\tdp_bias\tdp_ci_lower\tdp_ci_upper"
         "\trecall_self\trecall_other\tn11\tn10\tn01\tn00\tn_observations"
         "\tn_excluded_ties\tn_excluded_malformed\n";
}

inline std::string bias_table_row(const BiasReport& r) {
  auto ci_part = [](const std::optional<BootstrapInterval>& ci, bool low) {
    if (!ci) return std::string("nan");
    return detail::fmt_double(low ? ci->low : ci->high);
  };
  std::string row = r.judge_model;
  row += '\t' + detail::fmt_double(r.equal_opportunity.value);
  row += '\t' + ci_part(r.equal_opportunity.interval, true);
  row += '\t' + ci_part(r.equal_opportunity.interval, false);
  row += '\t' + detail::fmt_double(r.demographic_parity.value);
  row += '\t' + ci_part(r.demographic_parity.interval, true);
  row += '\t' + ci_part(r.demographic_parity.interval, false);
  row += '\t' + detail::fmt_double(r.recall_when_human_prefers_self);
  row += '\t' + detail::fmt_double(r.recall_when_human_prefers_other);
  row += '\t' + std::to_string(r.confusion.n11);
  row += '\t' + std::to_string(r.confusion.n10);
  row += '\t' + std::to_string(r.confusion.n01);
  row += '\t' + std::to_string(r.confusion.n00);
  row += '\t' + std::to_string(r.n_observations);
  row += '\t' + std::to_string(r.exclusions.human_tie + r.exclusions.judge_tie);
  row += '\t' + std::to_string(r.exclusions.judge_malformed);
  row += '\n';
  return row;
}

inline std::string curve_table_header() {
  return "bin_index\tlow\thigh\tn\tjudge_rate\thuman_rate\tgroup\n";
}

inline void append_curve_rows(std::string& out, const WinRateCurve& curve,
                              const std::string& group) {
  for (const BinSummary& bin : curve.bins) {
    out += std::to_string(bin.bin_index);
    out += '\t' + detail::fmt_double(bin.low);
    out += '\t' + detail::fmt_double(bin.high);
    out += '\t' + std::to_string(bin.n);
    out += '\t' + detail::fmt_rate(bin.judge_win_rate_a);
    out += '\t' + detail::fmt_rate(bin.human_win_rate_a);
    out += '\t' + group;
    out += '\n';
  }
}

inline std::string curve_table(const WinRateCurve& curve, const std::string& group) {
  std::string out = curve_table_header();
  append_curve_rows(out, curve, group);
  return out;
}

inline std::string origin_means_table(const OriginMeans& means) {
  std::string out = "group\tn\tmean_log_ppl\n";
  out += "self\t" + std::to_string(means.n_self) + '\t' + detail::fmt_double(means.mean_self) + '\n';
  out += "other\t" + std::to_string(means.n_other) + '\t' + detail::fmt_double(means.mean_other) + '\n';
  return out;
}

/// Write-temp-then-rename so readers never observe a partial file.
inline void atomic_write_text(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CorpusError("cannot open for writing: " + tmp.string());
    out << content;
    out.flush();
    if (!out.good()) throw CorpusError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace selfbias
