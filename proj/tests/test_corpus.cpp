#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <selfbias/corpus.hpp>

using namespace selfbias;

namespace {

DialogueRecord make_record(const std::string& id, const std::string& model_a,
                           const std::string& model_b, HumanLabel label = HumanLabel::a_wins) {
  DialogueRecord rec;
  rec.record_id = id;
  rec.context = {Turn{Role::user, "What is the capital of France?"}};
  rec.model_a = model_a;
  rec.model_b = model_b;
  rec.response_a = "Paris.";
  rec.response_b = "It is Paris, the largest city in France.";
  rec.human_label = label;
  return rec;
}

std::string to_line(const DialogueRecord& rec) { return record_to_json(rec).dump(); }

}  // namespace

TEST(CorpusRecord, JsonRoundTripPreservesEveryField) {
  DialogueRecord rec = make_record("r-42", "alpha", "beta", HumanLabel::tie_both_bad);
  rec.context = {Turn{Role::user, "first question"},
                 Turn{Role::assistant, "first answer"},
                 Turn{Role::user, "follow-up with unicode \xc3\xa9 and\nnewline"}};
  const DialogueRecord back = record_from_json(record_to_json(rec));
  EXPECT_EQ(rec, back);
}

TEST(CorpusRecord, AllLabelsRoundTrip) {
  for (HumanLabel label : {HumanLabel::a_wins, HumanLabel::b_wins, HumanLabel::tie,
                           HumanLabel::tie_both_bad}) {
    const DialogueRecord rec = make_record("r", "a", "b", label);
    EXPECT_EQ(label, record_from_json(record_to_json(rec)).human_label);
  }
}

TEST(CorpusRecord, MissingFieldThrows) {
  nlohmann::json j = record_to_json(make_record("r", "a", "b"));
  j.erase("model_b");
  EXPECT_THROW(record_from_json(j), std::invalid_argument);
}

TEST(CorpusRecord, UnknownLabelOrRoleThrows) {
  nlohmann::json j = record_to_json(make_record("r", "a", "b"));
  j["human_label"] = "model_a";
  EXPECT_THROW(record_from_json(j), std::invalid_argument);
  j = record_to_json(make_record("r", "a", "b"));
  j["context"][0]["role"] = "system";
  EXPECT_THROW(record_from_json(j), std::invalid_argument);
}

TEST(ValidateRecord, AcceptsWellFormedRecord) {
  EXPECT_EQ(std::nullopt, validate_record(make_record("r", "a", "b")));
}

TEST(ValidateRecord, ReportsFirstViolatedInvariant) {
  auto broken = [](auto mutate) {
    DialogueRecord rec = make_record("r", "a", "b");
    mutate(rec);
    return validate_record(rec);
  };
  EXPECT_EQ("empty record_id", broken([](auto& r) { r.record_id.clear(); }));
  EXPECT_EQ("empty model name", broken([](auto& r) { r.model_a.clear(); }));
  EXPECT_EQ("empty model name", broken([](auto& r) { r.model_b.clear(); }));
  EXPECT_EQ("model_a equals model_b", broken([](auto& r) { r.model_b = r.model_a; }));
  EXPECT_EQ("empty response_a", broken([](auto& r) { r.response_a = "  \t\n"; }));
  EXPECT_EQ("empty response_b", broken([](auto& r) { r.response_b.clear(); }));
  EXPECT_EQ("empty context", broken([](auto& r) { r.context.clear(); }));
  EXPECT_EQ("blank turn content", broken([](auto& r) { r.context[0].content = "   "; }));
  EXPECT_EQ("context has no user turn",
            broken([](auto& r) { r.context = {Turn{Role::assistant, "hello"}}; }));
  EXPECT_EQ("context does not end with a user turn", broken([](auto& r) {
              r.context.push_back(Turn{Role::assistant, "trailing answer"});
            }));
}

TEST(ParseCorpus, KeepsValidLinesAndRecordsRejections) {
  std::ostringstream text;
  text << to_line(make_record("r1", "a", "b")) << "\n";
  text << "{\"record_id\": \"r2\"}\n";  // missing everything else
  text << "\n   \n";                    // blank lines are not rejections
  text << "this is not json\n";
  text << to_line(make_record("r3", "a", "b")) << "\n";
  DialogueRecord no_user = make_record("r4", "a", "b");
  no_user.context = {Turn{Role::assistant, "only an answer"}};
  text << to_line(no_user) << "\n";

  std::istringstream in(text.str());
  const ParseReport report = parse_corpus_stream(in, CorpusFormat::canonical, "test");
  ASSERT_EQ(2u, report.corpus.records.size());
  EXPECT_EQ("r1", report.corpus.records[0].record_id);
  EXPECT_EQ("r3", report.corpus.records[1].record_id);
  EXPECT_EQ("test", report.corpus.provenance);
  ASSERT_EQ(3u, report.rejections.size());
  EXPECT_EQ(2u, report.rejections[0].line_number);
  EXPECT_EQ(5u, report.rejections[1].line_number);
  EXPECT_EQ(7u, report.rejections[2].line_number);
  EXPECT_EQ("context has no user turn", report.rejections[2].reason);
  for (const Rejection& r : report.rejections) EXPECT_FALSE(r.reason.empty());
}

TEST(ParseCorpus, DuplicateRecordIdIsAHardError) {
  std::istringstream in(to_line(make_record("dup", "a", "b")) + "\n" +
                        to_line(make_record("dup", "c", "d")) + "\n");
  try {
    parse_corpus_stream(in, CorpusFormat::canonical, "test");
    FAIL() << "expected CorpusError";
  } catch (const CorpusError& e) {
    EXPECT_NE(std::string(e.what()).find("dup"), std::string::npos);
  }
}

TEST(ParseCorpus, ZeroValidRecordsIsAHardError) {
  std::istringstream in("{\"broken\": true}\n");
  EXPECT_THROW(parse_corpus_stream(in, CorpusFormat::canonical, "test"), CorpusError);
  std::istringstream empty("");
  EXPECT_THROW(parse_corpus_stream(empty, CorpusFormat::canonical, "test"), CorpusError);
}

TEST(ParseCorpus, MissingFileThrows) {
  EXPECT_THROW(parse_corpus("/nonexistent/corpus.jsonl", CorpusFormat::canonical), CorpusError);
}

TEST(ParseCorpus, AcceptedSetIsLineOrderInvariant) {
  std::vector<std::string> lines;
  for (int i = 0; i < 20; ++i)
    lines.push_back(to_line(make_record("r" + std::to_string(i), "a", "b")));
  lines.push_back("not json at all");

  auto accepted_ids = [](const std::vector<std::string>& ls) {
    std::string text;
    for (const std::string& l : ls) text += l + "\n";
    std::istringstream in(text);
    const ParseReport report = parse_corpus_stream(in, CorpusFormat::canonical, "test");
    std::vector<std::string> ids;
    for (const DialogueRecord& r : report.corpus.records) ids.push_back(r.record_id);
    std::sort(ids.begin(), ids.end());
    return std::make_pair(ids, report.rejections.size());
  };

  const auto before = accepted_ids(lines);
  std::shuffle(lines.begin(), lines.end(), std::mt19937(7));
  const auto after = accepted_ids(lines);
  EXPECT_EQ(before.first, after.first);
  EXPECT_EQ(before.second, after.second);
}

TEST(ParseCorpus, WriteThenParseRoundTrips) {
  Corpus corpus;
  corpus.records = {make_record("r1", "a", "b", HumanLabel::b_wins),
                    make_record("r2", "c", "d", HumanLabel::tie)};
  std::ostringstream out;
  write_corpus(out, corpus);
  std::istringstream in(out.str());
  const ParseReport report = parse_corpus_stream(in, CorpusFormat::canonical, "rt");
  EXPECT_TRUE(report.rejections.empty());
  EXPECT_EQ(corpus.records, report.corpus.records);
}

namespace {

nlohmann::json arena_row(const std::string& winner) {
  return nlohmann::json{
      {"question_id", "q-77"},
      {"model_a", "vicuna-13b"},
      {"model_b", "alpaca-13b"},
      {"winner", winner},
      {"conversation_a",
       {{{"role", "user"}, {"content", "Tell me a joke."}},
        {{"role", "assistant"}, {"content", "Why did the chicken cross the road?"}}}},
      {"conversation_b",
       {{{"role", "user"}, {"content", "Tell me a joke."}},
        {{"role", "assistant"}, {"content", "I do not know any jokes."}}}}};
}

}  // namespace

TEST(ChatbotArena, SplitsResponsesOutOfParallelConversations) {
  const DialogueRecord rec = record_from_chatbot_arena(arena_row("model_a"));
  EXPECT_EQ("q-77", rec.record_id);
  EXPECT_EQ("vicuna-13b", rec.model_a);
  EXPECT_EQ("alpaca-13b", rec.model_b);
  EXPECT_EQ(HumanLabel::a_wins, rec.human_label);
  EXPECT_EQ("Why did the chicken cross the road?", rec.response_a);
  EXPECT_EQ("I do not know any jokes.", rec.response_b);
  ASSERT_EQ(1u, rec.context.size());
  EXPECT_EQ(Role::user, rec.context[0].role);
  EXPECT_EQ("Tell me a joke.", rec.context[0].content);
}

TEST(ChatbotArena, MultiTurnContextKeepsEarlierAssistantTurns) {
  nlohmann::json row = arena_row("model_b");
  row["conversation_a"] = {{{"role", "user"}, {"content", "Hi."}},
                           {{"role", "assistant"}, {"content", "Hello!"}},
                           {{"role", "user"}, {"content", "Tell me more."}},
                           {{"role", "assistant"}, {"content", "Final answer A."}}};
  const DialogueRecord rec = record_from_chatbot_arena(row);
  ASSERT_EQ(3u, rec.context.size());
  EXPECT_EQ(Role::assistant, rec.context[1].role);
  EXPECT_EQ("Final answer A.", rec.response_a);
  EXPECT_EQ(HumanLabel::b_wins, rec.human_label);
}

TEST(ChatbotArena, WinnerStringsMapToLabels) {
  EXPECT_EQ(HumanLabel::a_wins, record_from_chatbot_arena(arena_row("model_a")).human_label);
  EXPECT_EQ(HumanLabel::b_wins, record_from_chatbot_arena(arena_row("model_b")).human_label);
  EXPECT_EQ(HumanLabel::tie, record_from_chatbot_arena(arena_row("tie")).human_label);
  EXPECT_EQ(HumanLabel::tie_both_bad,
            record_from_chatbot_arena(arena_row("tie (bothbad)")).human_label);
  EXPECT_THROW(record_from_chatbot_arena(arena_row("draw")), std::invalid_argument);
}

TEST(ChatbotArena, NumericQuestionIdBecomesString) {
  nlohmann::json row = arena_row("tie");
  row["question_id"] = 12345;
  EXPECT_EQ("12345", record_from_chatbot_arena(row).record_id);
}

TEST(ChatbotArena, ConversationMustEndWithAssistantTurn) {
  nlohmann::json row = arena_row("model_a");
  row["conversation_b"] = {{{"role", "user"}, {"content", "Question without answer."}}};
  EXPECT_THROW(record_from_chatbot_arena(row), std::invalid_argument);
  row = arena_row("model_a");
  row["conversation_a"] = nlohmann::json::array();
  EXPECT_THROW(record_from_chatbot_arena(row), std::invalid_argument);
}

TEST(ChatbotArena, ParsesThroughTheStreamPath) {
  std::istringstream in(arena_row("model_a").dump() + "\n" + arena_row("draw").dump() + "\n");
  // Second line has a duplicate id anyway, but the unknown winner rejects it first.
  const ParseReport report = parse_corpus_stream(in, CorpusFormat::chatbot_arena, "arena");
  EXPECT_EQ(1u, report.corpus.records.size());
  ASSERT_EQ(1u, report.rejections.size());
  EXPECT_EQ(2u, report.rejections[0].line_number);
}

TEST(SelectSelfPairs, KeepsOnlySingleSidedJudgeRecords) {
  Corpus corpus;
  corpus.records = {make_record("r1", "judge", "rival"),
                    make_record("r2", "rival", "judge"),
                    make_record("r3", "rival", "other"),
                    make_record("r4", "judge", "judge")};
  const SelfPairSelection sel = select_self_pairs(corpus, "judge");
  ASSERT_EQ(2u, sel.selected.size());
  EXPECT_EQ("r1", sel.selected[0].record_id);
  EXPECT_EQ("r2", sel.selected[1].record_id);
  EXPECT_EQ(1u, sel.n_excluded_no_self);
  EXPECT_EQ(1u, sel.n_excluded_both_self);
}

TEST(SelectSelfPairs, PartitionsTheCorpus) {
  Corpus corpus;
  std::mt19937 gen(3);
  const std::vector<std::string> models = {"judge", "r1", "r2"};
  for (int i = 0; i < 300; ++i) {
    const std::string& a = models[gen() % models.size()];
    const std::string& b = models[gen() % models.size()];
    corpus.records.push_back(make_record("rec" + std::to_string(i), a, b));
  }
  const SelfPairSelection sel = select_self_pairs(corpus, "judge");
  EXPECT_EQ(corpus.records.size(),
            sel.selected.size() + sel.n_excluded_no_self + sel.n_excluded_both_self);
  for (const DialogueRecord& r : sel.selected)
    EXPECT_TRUE((r.model_a == "judge") != (r.model_b == "judge"));
}

TEST(SelectSelfPairs, NoSelfRecordsIsEmptyNotAnError) {
  Corpus corpus;
  corpus.records = {make_record("r1", "a", "b")};
  const SelfPairSelection sel = select_self_pairs(corpus, "judge");
  EXPECT_TRUE(sel.selected.empty());
  EXPECT_EQ(1u, sel.n_excluded_no_self);
}

TEST(SelectSelfPairs, EmptyJudgeNameThrows) {
  EXPECT_THROW(select_self_pairs(Corpus{}, ""), std::invalid_argument);
}
