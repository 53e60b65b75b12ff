#include <gtest/gtest.h>
#include <sys/wait.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <selfbias/selfbias.hpp>

namespace fs = std::filesystem;
using namespace selfbias;
using nlohmann::json;

namespace {

struct CliResult {
  int code = -1;
  std::string output;  // stdout and stderr, interleaved
};

CliResult run_cli(const std::string& args) {
  static std::atomic<int> counter{0};
  const fs::path log =
      fs::path(::testing::TempDir()) / ("cli_log_" + std::to_string(counter++) + ".txt");
  const std::string command =
      std::string(SELFBIAS_CLI_PATH) + " " + args + " >" + log.string() + " 2>&1";
  const int raw = std::system(command.c_str());
  CliResult result;
  result.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(log);
  std::stringstream buffer;
  buffer << in.rdbuf();
  result.output = buffer.str();
  fs::remove(log);
  return result;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::path(::testing::TempDir()) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream(path) << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

json read_json(const fs::path& path) { return json::parse(read_text(path)); }

std::vector<std::vector<std::string>> parse_tsv(const fs::path& path) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, '\t')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

fs::path write_judge_scenario(const fs::path& dir, double t1, double t0, std::size_t n,
                              std::uint64_t seed) {
  const json scenario = {{"kind", "judge"},
                         {"judge", {{"t1", t1}, {"t0", t0}, {"n", n}, {"seed", seed}}},
                         {"judge_model", "sim-judge"},
                         {"other_model", "sim-other"}};
  const fs::path path = dir / "scenario.json";
  write_text(path, scenario.dump(2));
  return path;
}

DialogueRecord live_record(const std::string& id) {
  DialogueRecord rec;
  rec.record_id = id;
  rec.context = {Turn{Role::user, "Which reply answers " + id + " better?"}};
  rec.model_a = "judge-m";
  rec.model_b = "model-beta";
  rec.response_a = "First candidate reply for " + id + ".";
  rec.response_b = "Second candidate reply for " + id + ".";
  rec.human_label = HumanLabel::a_wins;
  return rec;
}

std::string ok_verdict_body() {
  nlohmann::json content = nlohmann::json::array();
  content.push_back({{"token", "Final verdict: "}, {"logprob", -0.01},
                     {"top_logprobs", nlohmann::json::array()}});
  content.push_back({{"token", "[["}, {"logprob", -0.02},
                     {"top_logprobs", nlohmann::json::array()}});
  nlohmann::json choice_token{{"token", "A"}, {"logprob", -0.05}};
  choice_token["top_logprobs"] = nlohmann::json::array();
  choice_token["top_logprobs"].push_back({{"token", "A"}, {"logprob", -0.05}});
  choice_token["top_logprobs"].push_back({{"token", "B"}, {"logprob", -3.0}});
  content.push_back(choice_token);
  content.push_back({{"token", "]]"}, {"logprob", -0.03},
                     {"top_logprobs", nlohmann::json::array()}});
  nlohmann::json body;
  nlohmann::json choice;
  choice["logprobs"]["content"] = content;
  body["choices"] = nlohmann::json::array();
  body["choices"].push_back(choice);
  return body.dump();
}

class LoopbackServer {
 public:
  ~LoopbackServer() {
    server.stop();
    if (thread_.joinable()) thread_.join();
  }

  void start() {
    port_ = server.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port_, 0);
    thread_ = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  httplib::Server server;

 private:
  int port_ = 0;
  std::thread thread_;
};

json endpoint_json(const std::string& base_url) {
  return json{{"base_url", base_url},     {"api_key_env", "SELFBIAS_E2E_KEY"},
              {"timeout_s", 10},          {"max_attempts", 2},
              {"initial_backoff_ms", 1},  {"max_backoff_ms", 5}};
}

}  // namespace

TEST(CliBasics, HelpExitsCleanly) {
  const CliResult r = run_cli("--help");
  EXPECT_EQ(0, r.code);
  EXPECT_NE(std::string::npos, r.output.find("judge"));
  EXPECT_NE(std::string::npos, r.output.find("simulate"));
  EXPECT_NE(std::string::npos, r.output.find("--config"));
}

TEST(CliBasics, UsageMistakesExitWithConfigCode) {
  EXPECT_EQ(2, run_cli("").code);
  EXPECT_EQ(2, run_cli("metrics").code);  // --config is required
  EXPECT_EQ(2, run_cli("metrics --config /nonexistent/audit.json --bogus-flag 1").code);
  const CliResult missing = run_cli("metrics --config /nonexistent/audit.json");
  EXPECT_EQ(2, missing.code);
  EXPECT_NE(std::string::npos, missing.output.find("config error"));
}

TEST(CliBasics, UnknownScenarioKindIsAConfigError) {
  const fs::path dir = fresh_dir("e2e_badkind");
  write_text(dir / "scenario.json", R"({"kind": "nonsense"})");
  const CliResult r = run_cli("simulate --config " + (dir / "scenario.json").string());
  EXPECT_EQ(2, r.code);
  EXPECT_NE(std::string::npos, r.output.find("kind"));
}

TEST(CliBasics, MalformedJsonConfigIsAConfigError) {
  const fs::path dir = fresh_dir("e2e_badjson");
  write_text(dir / "broken.json", "{\"kind\": ");
  EXPECT_EQ(2, run_cli("simulate --config " + (dir / "broken.json").string()).code);
}

TEST(CliPipelines, SimulatedJudgeFlowsThroughMetrics) {
  const fs::path dir = fresh_dir("e2e_judge_sim");
  const fs::path scenario = write_judge_scenario(dir, 0.9, 0.6, 20000, 11);
  const CliResult sim =
      run_cli("simulate --config " + scenario.string() + " --output-dir " + dir.string());
  ASSERT_EQ(0, sim.code) << sim.output;
  ASSERT_TRUE(fs::exists(dir / "corpus.jsonl"));
  ASSERT_TRUE(fs::exists(dir / "verdicts.jsonl"));
  const json oracle = read_json(dir / "oracle.json");
  EXPECT_EQ("judge", oracle.at("kind").get<std::string>());
  const double expected_eo = oracle.at("expected_eo_bias").get<double>();
  const double expected_dp = oracle.at("expected_dp_bias").get<double>();

  const fs::path rundir = fresh_dir("e2e_judge_run");
  const json audit = {{"corpus", {{"path", (dir / "corpus.jsonl").string()}}},
                      {"judge_model", "sim-judge"},
                      {"cache_path", (dir / "verdicts.jsonl").string()},
                      {"output_dir", rundir.string()},
                      {"bootstrap", {{"resamples", 200}, {"seed", 5}}}};
  write_text(dir / "audit.json", audit.dump(2));
  const CliResult metrics = run_cli("metrics --config " + (dir / "audit.json").string());
  ASSERT_EQ(0, metrics.code) << metrics.output;
  EXPECT_NE(std::string::npos, metrics.output.find("eo_bias:"));

  const json report = read_json(rundir / "bias_report.json");
  ASSERT_EQ(1u, report.at("judges").size());
  const json& judge = report.at("judges").at(0);
  EXPECT_EQ("sim-judge", judge.at("judge_model").get<std::string>());
  EXPECT_NEAR(expected_eo, judge.at("eo_bias").get<double>(), 0.03);
  EXPECT_NEAR(expected_dp, judge.at("dp_bias").get<double>(), 0.03);
  EXPECT_EQ(20000u, judge.at("n_observations").get<std::uint64_t>());
  ASSERT_TRUE(judge.contains("eo_ci") && !judge.at("eo_ci").is_null());
  EXPECT_LE(judge.at("eo_ci").at("lower").get<double>(), judge.at("eo_bias").get<double>());
  EXPECT_GE(judge.at("eo_ci").at("upper").get<double>(), judge.at("eo_bias").get<double>());
  EXPECT_EQ(200u, judge.at("eo_ci").at("resamples").get<std::uint64_t>());
  EXPECT_EQ(5u, judge.at("eo_ci").at("seed").get<std::uint64_t>());

  const auto table = parse_tsv(rundir / "bias_table.tsv");
  ASSERT_EQ(2u, table.size());
  EXPECT_EQ("judge_model", table[0][0]);
  EXPECT_EQ("sim-judge", table[1][0]);
  EXPECT_NEAR(expected_eo, std::stod(table[1][1]), 0.03);
}

TEST(CliPipelines, SimulateIsDeterministicAndSeedOverrides) {
  const fs::path dir = fresh_dir("e2e_sim_det");
  const fs::path scenario = write_judge_scenario(dir, 0.8, 0.5, 500, 11);
  const fs::path out1 = fresh_dir("e2e_sim_det_a");
  const fs::path out2 = fresh_dir("e2e_sim_det_b");
  const fs::path out3 = fresh_dir("e2e_sim_det_c");
  ASSERT_EQ(0, run_cli("simulate --config " + scenario.string() + " --output-dir " + out1.string()).code);
  ASSERT_EQ(0, run_cli("simulate --config " + scenario.string() + " --output-dir " + out2.string()).code);
  EXPECT_EQ(read_text(out1 / "corpus.jsonl"), read_text(out2 / "corpus.jsonl"));
  EXPECT_EQ(read_text(out1 / "verdicts.jsonl"), read_text(out2 / "verdicts.jsonl"));
  EXPECT_EQ(read_text(out1 / "oracle.json"), read_text(out2 / "oracle.json"));

  ASSERT_EQ(0, run_cli("simulate --config " + scenario.string() + " --output-dir " +
                       out3.string() + " --seed 7")
                   .code);
  EXPECT_NE(read_text(out1 / "corpus.jsonl"), read_text(out3 / "corpus.jsonl"));
  EXPECT_EQ(7u, read_json(out3 / "oracle.json").at("seed").get<std::uint64_t>());
}

TEST(CliFailures, MetricsWithoutVerdictsPointsAtTheJudgeStep) {
  const fs::path dir = fresh_dir("e2e_missing_verdicts");
  const fs::path scenario = write_judge_scenario(dir, 0.8, 0.5, 50, 2);
  ASSERT_EQ(0, run_cli("simulate --config " + scenario.string() + " --output-dir " + dir.string()).code);
  const json audit = {{"corpus", {{"path", (dir / "corpus.jsonl").string()}}},
                      {"judge_model", "sim-judge"},
                      {"cache_path", (dir / "empty_cache.jsonl").string()},
                      {"output_dir", dir.string()},
                      {"bootstrap", false}};
  write_text(dir / "audit.json", audit.dump(2));
  const CliResult r = run_cli("metrics --config " + (dir / "audit.json").string());
  EXPECT_EQ(4, r.code);
  EXPECT_NE(std::string::npos, r.output.find("judge command"));
}

TEST(CliFailures, AllTiedLabelsLeaveNothingToAnalyze) {
  const fs::path dir = fresh_dir("e2e_all_ties");
  Corpus corpus;
  std::string verdict_lines;
  for (int i = 0; i < 3; ++i) {
    DialogueRecord rec = live_record("tie-" + std::to_string(i));
    rec.human_label = HumanLabel::tie;
    verdict_lines += score_to_json(detail::sim_score(rec.record_id, "judge-m", true)).dump() + "\n";
    corpus.records.push_back(std::move(rec));
  }
  write_corpus_file((dir / "corpus.jsonl").string(), corpus);
  write_text(dir / "verdicts.jsonl", verdict_lines);
  const json audit = {{"corpus", {{"path", (dir / "corpus.jsonl").string()}}},
                      {"judge_model", "judge-m"},
                      {"cache_path", (dir / "verdicts.jsonl").string()},
                      {"output_dir", dir.string()},
                      {"bootstrap", false}};
  write_text(dir / "audit.json", audit.dump(2));
  const CliResult r = run_cli("metrics --config " + (dir / "audit.json").string());
  EXPECT_EQ(5, r.code);
  EXPECT_NE(std::string::npos, r.output.find("analysis error"));
}

TEST(CliPipelines, PerplexityWorldMatchesItsOracle) {
  const fs::path dir = fresh_dir("e2e_world");
  const json bins = {{"strategy", "equal_width"},
                     {"bin_count", 8},
                     {"clip", {-2.0, 2.0}},
                     {"min_count_for_rate", 20}};
  const json scenario = {{"kind", "perplexity_world"},
                         {"world",
                          {{"w_judge", 2.0},
                           {"w_human", 1.0},
                           {"self_bonus", 0.0},
                           {"delta", {{"family", "uniform"}, {"center", 0.0}, {"spread", 2.0}}},
                           {"p_self_pair", 0.5},
                           {"n", 20000},
                           {"seed", 3}}},
                         {"bins", bins}};
  write_text(dir / "scenario.json", scenario.dump(2));
  const CliResult sim =
      run_cli("simulate --config " + (dir / "scenario.json").string() + " --output-dir " + dir.string());
  ASSERT_EQ(0, sim.code) << sim.output;
  ASSERT_TRUE(fs::exists(dir / "nll.jsonl"));
  const json oracle = read_json(dir / "oracle.json");
  ASSERT_EQ(8u, oracle.at("bins").size());

  const fs::path rundir = fresh_dir("e2e_world_run");
  const json audit = {{"corpus", {{"path", (dir / "corpus.jsonl").string()}}},
                      {"judge_model", "judge-model"},
                      {"precomputed_nll", (dir / "nll.jsonl").string()},
                      {"cache_path", (dir / "verdicts.jsonl").string()},
                      {"output_dir", rundir.string()},
                      {"bins", bins},
                      {"bootstrap", false}};
  write_text(dir / "audit.json", audit.dump(2));
  const CliResult run = run_cli("perplexity --config " + (dir / "audit.json").string());
  ASSERT_EQ(0, run.code) << run.output;
  EXPECT_NE(std::string::npos, run.output.find("binned 20000"));

  const auto overall = parse_tsv(rundir / "curve_overall.tsv");
  ASSERT_EQ(9u, overall.size());
  for (std::size_t i = 1; i < overall.size(); ++i) {
    const json& bin = oracle.at("bins").at(i - 1);
    ASSERT_EQ(7u, overall[i].size());
    EXPECT_EQ(std::to_string(i - 1), overall[i][0]);
    EXPECT_EQ(bin.at("low").get<double>(), std::stod(overall[i][1]));
    EXPECT_EQ(bin.at("high").get<double>(), std::stod(overall[i][2]));
    EXPECT_NEAR(bin.at("expected_judge_rate").get<double>(), std::stod(overall[i][4]), 0.05);
    EXPECT_NEAR(bin.at("expected_human_rate").get<double>(), std::stod(overall[i][5]), 0.05);
    EXPECT_EQ("all", overall[i][6]);
  }

  const auto split = parse_tsv(rundir / "curve_by_self.tsv");
  ASSERT_EQ(17u, split.size());
  for (std::size_t i = 1; i < split.size(); ++i) {
    const bool self_half = i <= 8;
    const json& bin = oracle.at("bins").at((i - 1) % 8);
    EXPECT_EQ(self_half ? "self" : "other", split[i][6]);
    const char* key = self_half ? "expected_self_rate" : "expected_other_rate";
    ASSERT_TRUE(bin.contains(key));
    EXPECT_NEAR(bin.at(key).get<double>(), std::stod(split[i][4]), 0.05);
  }

  const auto origin = parse_tsv(rundir / "log_ppl_by_origin.tsv");
  ASSERT_EQ(3u, origin.size());
  EXPECT_EQ("self", origin[1][0]);
  EXPECT_EQ("other", origin[2][0]);
  EXPECT_GT(std::stol(origin[1][1]), 0);
}

TEST(CliFailures, PerplexityNeedsExactlyOneNllSource) {
  const fs::path dir = fresh_dir("e2e_nll_sources");
  const json scenario = {{"kind", "perplexity_world"},
                         {"world", {{"w_judge", 1.0}, {"w_human", 1.0}, {"n", 50}, {"seed", 1}}}};
  write_text(dir / "scenario.json", scenario.dump(2));
  ASSERT_EQ(0, run_cli("simulate --config " + (dir / "scenario.json").string() + " --output-dir " +
                       dir.string())
                   .code);

  json neither = {{"corpus", {{"path", (dir / "corpus.jsonl").string()}}},
                  {"judge_model", "judge-model"},
                  {"cache_path", (dir / "verdicts.jsonl").string()},
                  {"output_dir", dir.string()}};
  write_text(dir / "neither.json", neither.dump(2));
  EXPECT_EQ(2, run_cli("perplexity --config " + (dir / "neither.json").string()).code);

  json both = neither;
  both["precomputed_nll"] = (dir / "nll.jsonl").string();
  both["scoring_endpoint"] = {{"base_url", "http://127.0.0.1:9"}};
  write_text(dir / "both.json", both.dump(2));
  EXPECT_EQ(2, run_cli("perplexity --config " + (dir / "both.json").string()).code);
}

TEST(CliFailures, PerplexityWithoutVerdictsPointsAtTheJudgeStep) {
  const fs::path dir = fresh_dir("e2e_world_noverdicts");
  const json scenario = {{"kind", "perplexity_world"},
                         {"world", {{"w_judge", 1.0}, {"w_human", 1.0}, {"n", 60}, {"seed", 5}}}};
  write_text(dir / "scenario.json", scenario.dump(2));
  ASSERT_EQ(0, run_cli("simulate --config " + (dir / "scenario.json").string() + " --output-dir " +
                       dir.string())
                   .code);
  const json audit = {{"corpus", {{"path", (dir / "corpus.jsonl").string()}}},
                      {"judge_model", "judge-model"},
                      {"precomputed_nll", (dir / "nll.jsonl").string()},
                      {"cache_path", (dir / "fresh_cache.jsonl").string()},
                      {"output_dir", dir.string()},
                      {"bootstrap", false}};
  write_text(dir / "audit.json", audit.dump(2));
  const CliResult r = run_cli("perplexity --config " + (dir / "audit.json").string());
  EXPECT_EQ(4, r.code);
  EXPECT_NE(std::string::npos, r.output.find("judge command"));
}

TEST(CliPipelines, JudgeCommandFillsTheCacheOverLoopbackHttp) {
  unsetenv("SELFBIAS_E2E_KEY");
  LoopbackServer server;
  std::atomic<int> hits{0};
  server.server.Post("/v1/chat/completions",
                     [&](const httplib::Request&, httplib::Response& res) {
                       ++hits;
                       res.set_content(ok_verdict_body(), "application/json");
                     });
  server.start();

  const fs::path dir = fresh_dir("e2e_judge_live");
  Corpus corpus;
  for (int i = 0; i < 3; ++i) corpus.records.push_back(live_record("live-" + std::to_string(i)));
  write_corpus_file((dir / "corpus.jsonl").string(), corpus);
  const json audit = {{"corpus", {{"path", (dir / "corpus.jsonl").string()}}},
                      {"judge_model", "judge-m"},
                      {"endpoint", endpoint_json(server.url())},
                      {"cache_path", (dir / "verdicts.jsonl").string()},
                      {"output_dir", dir.string()}};
  write_text(dir / "audit.json", audit.dump(2));

  const CliResult first = run_cli("judge --config " + (dir / "audit.json").string());
  ASSERT_EQ(0, first.code) << first.output;
  EXPECT_NE(std::string::npos, first.output.find("judged 3 record(s)"));
  EXPECT_EQ(6, hits.load());
  std::size_t verdict_lines = 0;
  std::stringstream verdicts(read_text(dir / "verdicts.jsonl"));
  for (std::string line; std::getline(verdicts, line);)
    if (!line.empty()) ++verdict_lines;
  EXPECT_EQ(3u, verdict_lines);

  const CliResult second = run_cli("judge --config " + (dir / "audit.json").string());
  ASSERT_EQ(0, second.code) << second.output;
  EXPECT_NE(std::string::npos, second.output.find("3 from cache"));
  EXPECT_EQ(6, hits.load());
}

TEST(CliFailures, UnreachableEndpointIsATransportFailure) {
  const fs::path dir = fresh_dir("e2e_unreachable");
  Corpus corpus;
  corpus.records.push_back(live_record("only"));
  write_corpus_file((dir / "corpus.jsonl").string(), corpus);
  json endpoint = endpoint_json("http://127.0.0.1:9");
  endpoint["max_attempts"] = 1;
  const json audit = {{"corpus", {{"path", (dir / "corpus.jsonl").string()}}},
                      {"judge_model", "judge-m"},
                      {"endpoint", endpoint},
                      {"output_dir", dir.string()}};
  write_text(dir / "audit.json", audit.dump(2));
  const CliResult r = run_cli("judge --config " + (dir / "audit.json").string());
  EXPECT_EQ(3, r.code);
  EXPECT_NE(std::string::npos, r.output.find("transport error"));
}

TEST(CliFailures, RejectedCredentialsAreATransportFailure) {
  unsetenv("SELFBIAS_E2E_KEY");
  LoopbackServer server;
  server.server.Post("/v1/chat/completions",
                     [](const httplib::Request&, httplib::Response& res) { res.status = 401; });
  server.start();

  const fs::path dir = fresh_dir("e2e_auth");
  Corpus corpus;
  corpus.records.push_back(live_record("only"));
  write_corpus_file((dir / "corpus.jsonl").string(), corpus);
  const json audit = {{"corpus", {{"path", (dir / "corpus.jsonl").string()}}},
                      {"judge_model", "judge-m"},
                      {"endpoint", endpoint_json(server.url())},
                      {"output_dir", dir.string()}};
  write_text(dir / "audit.json", audit.dump(2));
  const CliResult r = run_cli("judge --config " + (dir / "audit.json").string());
  EXPECT_EQ(3, r.code);
  EXPECT_NE(std::string::npos, r.output.find("auth error"));
}
