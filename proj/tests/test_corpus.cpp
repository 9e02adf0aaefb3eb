#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "aspd/corpus.hpp"
#include "aspd/errors.hpp"
#include "aspd/metrics.hpp"
#include "aspd/tokenizer.hpp"
#include "support/generators.hpp"

using namespace aspd;

namespace {

// Checks that `text` is rejected at the given byte with the given expectation.
void expect_parse_error(const std::string& text, std::size_t offset,
                        const std::string& expected) {
  INFO("input: ", text);
  try {
    parse_tagged(text);
    FAIL_CHECK("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.offset() == offset);
    CHECK(e.expected() == expected);
  }
}

ParallelGroup make_group(std::vector<std::string> titles,
                         std::vector<std::string> branches) {
  ParallelGroup g;
  g.titles = std::move(titles);
  g.branches = std::move(branches);
  return g;
}

// A judge whose votes follow a fixed per-call schedule; rewrites are
// delegated unchanged.
class ScriptedJudge : public JudgeClient {
 public:
  explicit ScriptedJudge(std::vector<int> schedule)
      : schedule_(std::move(schedule)) {}

  // schedule entries: 1 = yes, 0 = no, -1 = throw a transport error
  bool judge(JudgeStage, const std::string& payload, int) override {
    payloads.push_back(payload);
    int entry = cursor_ < schedule_.size() ? schedule_[cursor_++] : 1;
    if (entry < 0) {
      throw JudgeTransportError("judge unreachable");
    }
    return entry != 0;
  }

  std::string rewrite(const std::string&, const std::string& response,
                      int) override {
    return response;
  }

  std::vector<std::string> payloads;

 private:
  std::vector<int> schedule_;
  std::size_t cursor_ = 0;
};

// Fails the first `failures` rewrite calls, then behaves like MockJudge.
class FlakyRewriteJudge : public JudgeClient {
 public:
  explicit FlakyRewriteJudge(int failures) : failures_(failures) {}

  bool judge(JudgeStage stage, const std::string& payload,
             int sample_index) override {
    return inner_.judge(stage, payload, sample_index);
  }

  std::string rewrite(const std::string& prompt, const std::string& response,
                      int sample_index) override {
    ++rewrite_calls;
    if (failures_ > 0) {
      --failures_;
      throw JudgeTransportError("rewrite service down");
    }
    return inner_.rewrite(prompt, response, sample_index);
  }

  int rewrite_calls = 0;

 private:
  int failures_;
  MockJudge inner_;
};

CorpusSample make_sample(std::string id, std::string response) {
  CorpusSample s;
  s.id = std::move(id);
  s.prompt = "Explain the procedure.";
  s.response = std::move(response);
  return s;
}

}  // namespace

// ============================================================================
// Parsing and serialization
// ============================================================================

TEST_CASE("plain text parses as a single serial segment") {
  StructuredResponse r = parse_tagged("Mix and bake.");
  REQUIRE(r.segments.size() == 1);
  CHECK(r.segments[0].kind == ResponseSegment::Kind::Serial);
  CHECK(r.segments[0].text == "Mix and bake.");
  CHECK_FALSE(r.has_group());
  CHECK(r.group_count() == 0);
  CHECK(serialize(r) == "Mix and bake.");

  CHECK(parse_tagged("").segments.empty());
  CHECK(serialize(StructuredResponse{}) == "");
}

TEST_CASE("a tagged group parses into titles and prefixed branches") {
  std::string text =
      "Plan:<Title>Mix</Title><Title>Bake</Title><Para>"
      "<Branch>Mix: stir well</Branch><Branch>Bake: 20 minutes</Branch>"
      "</Para>Serve.";
  StructuredResponse r = parse_tagged(text);
  REQUIRE(r.segments.size() == 3);
  CHECK(r.segments[0].text == "Plan:");
  REQUIRE(r.segments[1].kind == ResponseSegment::Kind::Group);
  const ParallelGroup& g = r.segments[1].group;
  CHECK(g.titles == std::vector<std::string>{"Mix", "Bake"});
  CHECK(g.branches ==
        std::vector<std::string>{"Mix: stir well", "Bake: 20 minutes"});
  CHECK(r.segments[2].text == "Serve.");
  CHECK(r.has_group());
  CHECK(r.group_count() == 1);
  CHECK(serialize(r) == text);
}

TEST_CASE("groups parse at the edges and back to back") {
  std::string one = "<Title>A</Title><Para><Branch>A: x</Branch></Para>";
  StructuredResponse lone = parse_tagged(one);
  REQUIRE(lone.segments.size() == 1);
  CHECK(lone.segments[0].kind == ResponseSegment::Kind::Group);

  StructuredResponse pair = parse_tagged(one + one);
  REQUIRE(pair.segments.size() == 2);
  CHECK(pair.segments[0].kind == ResponseSegment::Kind::Group);
  CHECK(pair.segments[1].kind == ResponseSegment::Kind::Group);
  CHECK(pair.group_count() == 2);
  CHECK(serialize(pair) == one + one);
}

TEST_CASE("parse errors carry the byte offset and the expectation") {
  // A non-title marker in open text.
  expect_parse_error("x</Title>y", 1, "text or \"<Title>\"");
  expect_parse_error("go<Para>", 2, "text or \"<Title>\"");
  // An unterminated title runs off the end.
  expect_parse_error("<Title>abc", 10, "\"</Title>\"");
  // Text is not allowed between a title run and its group body.
  expect_parse_error(
      "<Title>a</Title>x<Para><Branch>a: b</Branch></Para>", 16,
      "\"<Title>\" or \"<Para>\"");
  // Branches must start immediately after the group opens.
  expect_parse_error(
      "<Title>a</Title><Para>x<Branch>a: b</Branch></Para>", 22,
      "\"<Branch>\"");
  // An unterminated branch runs off the end.
  expect_parse_error("<Title>a</Title><Para><Branch>a: b", 34,
                     "\"</Branch>\"");
  // Nested groups are rejected inside the branch body.
  expect_parse_error(
      "<Title>a</Title><Para><Branch>a: <Para>x</Para></Branch></Para>", 33,
      "\"</Branch>\"");
  // Two titles announce two branches; the closer comes too early.
  expect_parse_error(
      "<Title>a</Title><Title>b</Title><Para><Branch>a: x</Branch></Para>",
      59, "\"<Branch>\"");
  // One title announces one branch; a second branch is one too many.
  expect_parse_error(
      "<Title>a</Title><Para><Branch>a: x</Branch><Branch>b: y</Branch>"
      "</Para>",
      43, "\"</Para>\" after 1 branches (one per title)");
  // Text after the last branch is rejected at its own position.
  expect_parse_error(
      "<Title>a</Title><Para><Branch>a: b</Branch>x</Para>", 43,
      "\"</Para>\" after 1 branches (one per title)");
}

TEST_CASE("serial pushes merge and empty pushes vanish") {
  StructuredResponse r;
  r.push_serial("");
  CHECK(r.segments.empty());
  r.push_serial("ab");
  r.push_serial("cd");
  REQUIRE(r.segments.size() == 1);
  CHECK(r.segments[0].text == "abcd");
  r.push_group(make_group({"T"}, {"T: x"}));
  r.push_serial("ef");
  REQUIRE(r.segments.size() == 3);
  CHECK(r.segments[2].text == "ef");
}

TEST_CASE("parse and serialize are inverse on random structured text") {
  std::mt19937_64 rng(20260816);
  for (int trial = 0; trial < 300; ++trial) {
    StructuredResponse response = testsupport::random_tagged(rng);
    std::string text = serialize(response);
    CHECK(parse_tagged(text) == response);
    CHECK(serialize(parse_tagged(text)) == text);
  }
}

// ============================================================================
// Structural validation
// ============================================================================

TEST_CASE("well-formed groups pass the structural checks") {
  StructuredResponse r = parse_tagged(
      "Plan:<Title>Mix</Title><Para><Branch>Mix: stir</Branch></Para>"
      "<Title>A</Title><Title>B</Title><Para><Branch>A: x</Branch>"
      "<Branch>B: y</Branch></Para>done");
  ValidationReport report = validate_integrity(r);
  REQUIRE(report.groups.size() == 2);
  CHECK(report.all_pass());
  CHECK(report.groups[0].group_index == 0);
  CHECK(report.groups[1].group_index == 1);
  CHECK(report.groups[0].reason.empty());
}

TEST_CASE("structural defects report the first failing reason") {
  auto check_single = [](ParallelGroup g, const std::string& reason) {
    StructuredResponse r;
    r.push_group(std::move(g));
    ValidationReport report = validate_integrity(r);
    REQUIRE(report.groups.size() == 1);
    CHECK(report.groups[0].verdict == Verdict::StructuralFail);
    CHECK(report.groups[0].reason == reason);
    CHECK_FALSE(report.all_pass());
  };

  check_single(make_group({}, {}), "group has no titles");
  check_single(make_group({"A"}, {}), "group has 1 titles but 0 branches");
  check_single(make_group({"A", "B"}, {"A: x"}),
               "group has 2 titles but 1 branches");
  check_single(make_group({"A"}, {"B: x"}),
               "branch 1 does not start with its \"Title: \" prefix");
  check_single(make_group({"A"}, {"A: "}), "branch 1 has an empty body");
  check_single(make_group({"A<Para>"}, {"A<Para>: x"}),
               "title 1 contains a marker");
  check_single(make_group({"A"}, {"A: x</Branch>"}),
               "branch 1 contains a marker");
}

TEST_CASE("validation indexes groups across interleaved serial text") {
  StructuredResponse r;
  r.push_serial("before");
  r.push_group(make_group({"A"}, {"broken"}));
  r.push_serial("middle");
  r.push_group(make_group({"B"}, {"B: fine"}));
  ValidationReport report = validate_integrity(r);
  REQUIRE(report.groups.size() == 2);
  CHECK(report.groups[0].group_index == 0);
  CHECK(report.groups[0].verdict == Verdict::StructuralFail);
  CHECK(report.groups[1].group_index == 1);
  CHECK(report.groups[1].verdict == Verdict::Pass);
}

// ============================================================================
// Judged decisions
// ============================================================================

TEST_CASE("a unanimous decision needs every vote to be yes") {
  SUBCASE("all yes passes") {
    ScriptedJudge judge({1, 1, 1});
    GroupVerdict v = unanimous_votes(JudgeStage::Independence, "p", judge, 3, 0);
    CHECK(v.verdict == Verdict::Pass);
    CHECK(v.votes == std::vector<bool>{true, true, true});
    CHECK(v.reason.empty());
  }
  SUBCASE("one dissent fails with the dissenting vote named") {
    ScriptedJudge judge({1, 0, 1});
    GroupVerdict v = unanimous_votes(JudgeStage::Independence, "p", judge, 3, 0);
    CHECK(v.verdict == Verdict::JudgeFail);
    CHECK(v.votes == std::vector<bool>{true, false, true});
    CHECK(v.reason == "vote 2 of 3 dissented");
  }
  SUBCASE("a single vote suffices when one sample is requested") {
    ScriptedJudge judge({1});
    GroupVerdict v = unanimous_votes(JudgeStage::Independence, "p", judge, 1, 0);
    CHECK(v.verdict == Verdict::Pass);
    CHECK(v.votes.size() == 1);
  }
}

TEST_CASE("transport errors are retried and eventually fail the vote") {
  SUBCASE("a vote that recovers within the retry budget passes") {
    ScriptedJudge judge({-1, -1, 1, 1, 1});
    GroupVerdict v = unanimous_votes(JudgeStage::Independence, "p", judge, 3, 2);
    CHECK(v.verdict == Verdict::Pass);
    CHECK(v.votes == std::vector<bool>{true, true, true});
    CHECK(judge.payloads.size() == 5);  // two failures plus three votes
  }
  SUBCASE("an exhausted retry budget fails with no votes recorded") {
    ScriptedJudge judge({-1, -1});
    GroupVerdict v = unanimous_votes(JudgeStage::Independence, "p", judge, 3, 1);
    CHECK(v.verdict == Verdict::JudgeFail);
    CHECK(v.votes.empty());
    CHECK(v.reason == "vote 1 unavailable after 2 attempts");
  }
}

TEST_CASE("each group is judged once on its joined branch texts") {
  StructuredResponse r = parse_tagged(
      "x<Title>A</Title><Title>B</Title><Para><Branch>A: one</Branch>"
      "<Branch>B: two</Branch></Para>y"
      "<Title>C</Title><Para><Branch>C: three</Branch></Para>");
  ScriptedJudge judge({1, 1});
  ValidationReport report =
      judged_stage(r, JudgeStage::Independence, judge, 1, 0);
  REQUIRE(report.groups.size() == 2);
  CHECK(report.groups[0].group_index == 0);
  CHECK(report.groups[1].group_index == 1);
  REQUIRE(judge.payloads.size() == 2);
  CHECK(judge.payloads[0] == "A: one\n---\nB: two");
  CHECK(judge.payloads[1] == "C: three");
}

// ============================================================================
// The deterministic local judge
// ============================================================================

TEST_CASE("independence judging flags branches that reference each other") {
  MockJudge judge;
  auto vote = [&](const std::string& payload) {
    return judge.judge(JudgeStage::Independence, payload, 0);
  };
  CHECK(vote("A: compute the area\n---\nB: compute the volume"));
  CHECK_FALSE(vote("B: reuse the value as above"));
  CHECK_FALSE(vote("B: As Above, reuse it"));
  CHECK_FALSE(vote("B: the previously computed sum"));
  CHECK_FALSE(vote("B: the aforementioned total"));
  CHECK_FALSE(vote("B: see above for details"));
}

TEST_CASE("integrity judging demands every long original word survive") {
  MockJudge judge;
  auto vote = [&](const std::string& original, const std::string& candidate) {
    return judge.judge(JudgeStage::IntegrityAnswer,
                       original + "\n<<<>>>\n" + candidate, 0);
  };
  CHECK(vote("The aggregate revenue doubled",
             "<Title>X</Title>doubled REVENUE aggregate"));
  CHECK_FALSE(vote("The aggregate revenue doubled", "aggregate doubled"));
  CHECK(vote("all tiny words here", "nothing matches at all"));
  // Without the separator the payload is malformed and the vote is no.
  CHECK_FALSE(judge.judge(JudgeStage::IntegrityAnswer, "no separator", 0));
  // Rewriting-stage votes are always yes.
  CHECK(judge.judge(JudgeStage::Rewriting, "anything", 0));
}

TEST_CASE("rewriting turns item runs into parallel groups") {
  MockJudge judge;
  std::string response =
      "Intro line\n- Alpha: one\n- Beta: two\nOutro";

  SUBCASE("candidate 0 groups runs of two or more") {
    std::string out = judge.rewrite("p", response, 0);
    CHECK(out ==
          "Intro line<Title>Alpha</Title><Title>Beta</Title><Para>"
          "<Branch>Alpha: one</Branch><Branch>Beta: two</Branch></Para>"
          "Outro");
    StructuredResponse parsed = parse_tagged(out);
    CHECK(parsed.group_count() == 1);
    CHECK(validate_integrity(parsed).all_pass());
  }
  SUBCASE("candidate 1 needs runs of three and leaves this one alone") {
    CHECK(judge.rewrite("p", response, 1) == response);
  }
  SUBCASE("candidate 2 is always the unchanged response") {
    CHECK(judge.rewrite("p", response, 2) == response);
    CHECK(judge.rewrite("p", response, 5) == response);
  }
  SUBCASE("a run of three clears both thresholds") {
    std::string three = "- A: x\n- B: y\n- C: z";
    std::string out = judge.rewrite("p", three, 1);
    StructuredResponse parsed = parse_tagged(out);
    REQUIRE(parsed.group_count() == 1);
    CHECK(parsed.segments[0].group.titles ==
          std::vector<std::string>{"A", "B", "C"});
  }
}

TEST_CASE("rewriting invents titles for items without a usable colon") {
  MockJudge judge;
  std::string out =
      judge.rewrite("p", "- plain item\n- another plain item", 0);
  StructuredResponse parsed = parse_tagged(out);
  REQUIRE(parsed.group_count() == 1);
  const ParallelGroup& g = parsed.segments[0].group;
  CHECK(g.titles == std::vector<std::string>{"Item 1", "Item 2"});
  CHECK(g.branches == std::vector<std::string>{"Item 1: plain item",
                                               "Item 2: another plain item"});
  CHECK(validate_integrity(parsed).all_pass());

  // A colon too far in does not make a title either.
  std::string longhead(60, 'x');
  std::string out2 = judge.rewrite(
      "p", "- " + longhead + ": tail\n- " + longhead + ": tail", 0);
  StructuredResponse parsed2 = parse_tagged(out2);
  REQUIRE(parsed2.group_count() == 1);
  CHECK(parsed2.segments[0].group.titles ==
        std::vector<std::string>{"Item 1", "Item 2"});
}

// ============================================================================
// Degeneration
// ============================================================================

TEST_CASE("collapsing a group splices branch bodies into the text") {
  StructuredResponse r = parse_tagged(
      "Pick.<Title>A</Title><Title>B</Title><Para><Branch>A: one</Branch>"
      "<Branch>B: two</Branch></Para>Done.");
  StructuredResponse collapsed = degenerate(r, 0);
  REQUIRE(collapsed.segments.size() == 1);
  CHECK(collapsed.segments[0].text == "Pick.one\ntwoDone.");
  CHECK_FALSE(collapsed.has_group());
}

TEST_CASE("collapsing keeps branch text whole when the prefix is absent") {
  StructuredResponse r;
  r.push_group(make_group({"A"}, {"mismatched body"}));
  StructuredResponse collapsed = degenerate(r, 0);
  REQUIRE(collapsed.segments.size() == 1);
  CHECK(collapsed.segments[0].text == "mismatched body");
}

TEST_CASE("degeneration targets one group and leaves the others") {
  std::string text =
      "<Title>A</Title><Para><Branch>A: x</Branch></Para>mid"
      "<Title>B</Title><Para><Branch>B: y</Branch></Para>";
  StructuredResponse r = parse_tagged(text);
  StructuredResponse keep_first = degenerate(r, 1);
  REQUIRE(keep_first.segments.size() == 2);
  CHECK(keep_first.segments[0].kind == ResponseSegment::Kind::Group);
  CHECK(keep_first.segments[1].text == "midy");

  StructuredResponse keep_second = degenerate(r, 0);
  REQUIRE(keep_second.segments.size() == 2);
  CHECK(keep_second.segments[0].text == "xmid");
  CHECK(keep_second.segments[1].kind == ResponseSegment::Kind::Group);

  CHECK_THROWS_AS(degenerate(r, 2), ValidationError);
}

TEST_CASE("degenerating everything equals collapsing groups one by one") {
  auto has_marker = [](const std::string& text) {
    for (const char* marker : {"<Title>", "</Title>", "<Branch>", "</Branch>",
                               "<Para>", "</Para>"}) {
      if (text.find(marker) != std::string::npos) return true;
    }
    return false;
  };
  std::mt19937_64 rng(416);
  for (int trial = 0; trial < 50; ++trial) {
    StructuredResponse r = testsupport::random_tagged(rng);
    StructuredResponse all = degenerate_all(r);
    CHECK_FALSE(all.has_group());
    CHECK_FALSE(has_marker(serialize(all)));
    CHECK(degenerate_all(all) == all);

    StructuredResponse chained = r;
    while (chained.has_group()) {
      chained = degenerate(chained, 0);
    }
    CHECK(chained == all);
  }
}

// ============================================================================
// Candidate selection
// ============================================================================

TEST_CASE("selection prefers parallel share, then branch count, then order") {
  StructuredResponse serial_only = parse_tagged("just words");

  // Two branches, 22 parallel tokens of 36 total.
  StructuredResponse two = parse_tagged(
      "<Title>Long</Title><Title>Goal</Title><Para>"
      "<Branch>Long: 123</Branch><Branch>Goal: 456</Branch></Para>");
  // Three branches, the same 22-of-36 parallel share.
  StructuredResponse three = parse_tagged(
      "<Title>A</Title><Title>B</Title><Title>C</Title><Para>"
      "<Branch>A: 123</Branch><Branch>B: 45</Branch><Branch>C: 67</Branch>"
      "</Para>end");

  ByteTokenizer tokenizer;
  SampleMetrics m2 = sample_metrics(two, tokenizer);
  SampleMetrics m3 = sample_metrics(three, tokenizer);
  REQUIRE(m2.dp == doctest::Approx(m3.dp));  // the tie the test relies on

  std::vector<StructuredResponse> candidates{serial_only, two, three};
  CHECK(select_preferred(candidates) == 2);  // tie on dp, more branches wins

  std::vector<StructuredResponse> reversed{three, two, serial_only};
  CHECK(select_preferred(reversed) == 0);

  std::vector<StructuredResponse> duplicates{two, two, serial_only};
  CHECK(select_preferred(duplicates) == 0);  // full tie keeps the lowest index

  std::vector<StructuredResponse> serial_all{serial_only, serial_only};
  CHECK(select_preferred(serial_all) == 0);

  CHECK_THROWS_AS(select_preferred(std::vector<StructuredResponse>{}),
                  ValidationError);
}

// ============================================================================
// Training layout
// ============================================================================

TEST_CASE("the training layout lists branches contiguously with shared positions") {
  ByteTokenizer tokenizer;
  const SpecialTokens& sp = tokenizer.specials();

  StructuredResponse r;
  r.push_serial("hi");
  r.push_group(make_group({"A", "B"}, {"A: xy", "B: z"}));
  TrainingExample ex = emit_training_layout(r, tokenizer);

  std::vector<int> expected_tokens = {
      'h', 'i',
      sp.title_open, 'A', sp.title_close,
      sp.title_open, 'B', sp.title_close,
      sp.para_open,
      sp.branch_open, 'A', ':', ' ', 'x', 'y', sp.branch_close,
      sp.branch_open, 'B', ':', ' ', 'z', sp.branch_close,
      sp.para_close};
  CHECK(ex.tokens == expected_tokens);

  std::vector<int> expected_positions = {1, 2, 3, 4,  5,  6,  7,  8,
                                         9, 10, 11, 12, 13, 14, 15, 16,
                                         10, 11, 12, 13, 14, 15, 23};
  CHECK(ex.positions == expected_positions);

  CHECK(ex.loss == std::vector<std::uint8_t>(23, 1));
  REQUIRE(ex.mask.rows().size() == 23);

  using Ranges = std::vector<std::pair<std::size_t, std::size_t>>;
  // The first branch sees the serial prefix and itself.
  CHECK(ex.mask.rows()[9].ranges == Ranges{{0, 10}});
  // The second branch skips over the first entirely.
  CHECK(ex.mask.rows()[16].ranges == Ranges{{0, 9}, {16, 17}});
  CHECK(ex.mask.rows()[21].ranges == Ranges{{0, 9}, {16, 22}});
  // The closing marker rejoins the main branch and sees everything.
  CHECK(ex.mask.rows()[22].ranges == Ranges{{0, 23}});
}

TEST_CASE("shared visibility opens lockstep peers to each other") {
  ByteTokenizer tokenizer;
  StructuredResponse r;
  r.push_serial("hi");
  r.push_group(make_group({"A", "B"}, {"A: xy", "B: z"}));
  TrainingExample ex =
      emit_training_layout(r, tokenizer, VisibilityMode::Shared);

  using Ranges = std::vector<std::pair<std::size_t, std::size_t>>;
  // The second branch's opener now sees the first branch's opener too:
  // lockstep interleaving put that token one step before it.
  CHECK(ex.mask.rows()[16].ranges == Ranges{{0, 10}, {16, 17}});

  // Shared visibility is a superset of independent visibility everywhere.
  TrainingExample indep = emit_training_layout(r, tokenizer);
  for (std::size_t row = 0; row < ex.mask.rows().size(); ++row) {
    for (std::size_t col = 0; col < ex.tokens.size(); ++col) {
      if (indep.mask.rows()[row].at(col)) {
        CHECK(ex.mask.rows()[row].at(col));
      }
    }
  }
}

TEST_CASE("training layouts keep branch positions consecutive from the stage start") {
  ByteTokenizer tokenizer;
  const SpecialTokens& sp = tokenizer.specials();
  std::mt19937_64 rng(515);
  for (int trial = 0; trial < 30; ++trial) {
    StructuredResponse r = testsupport::random_tagged(rng);
    TrainingExample ex = emit_training_layout(r, tokenizer);
    REQUIRE(ex.tokens.size() == ex.positions.size());
    REQUIRE(ex.mask.rows().size() == ex.tokens.size());
    REQUIRE(ex.loss.size() == ex.tokens.size());

    std::size_t i = 0;
    int serial_pos = 0;
    while (i < ex.tokens.size()) {
      if (ex.tokens[i] != sp.branch_open) {
        // Main-branch tokens advance one position at a time.
        CHECK(ex.positions[i] > serial_pos);
        serial_pos = ex.positions[i];
        CHECK(ex.mask.rows()[i].at(i));
        ++i;
        continue;
      }
      // A branch: consecutive tokens through its closing marker, with
      // positions counting up from wherever the branch started.
      int offset = ex.positions[i];
      while (ex.tokens[i] != sp.branch_close) {
        CHECK(ex.positions[i] == offset);
        CHECK(ex.mask.rows()[i].at(i));
        ++offset;
        ++i;
        REQUIRE(i < ex.tokens.size());
      }
      CHECK(ex.positions[i] == offset);
      ++i;
    }
  }
}

TEST_CASE("a training example serializes ranges as half-open pairs") {
  ByteTokenizer tokenizer;
  StructuredResponse r;
  r.push_serial("ab");
  TrainingExample ex = emit_training_layout(r, tokenizer);
  nlohmann::ordered_json j = ex.to_json();
  CHECK(j["tokens"] == nlohmann::ordered_json::array({'a', 'b'}));
  CHECK(j["positions"] == nlohmann::ordered_json::array({1, 2}));
  CHECK(j["visible"][0] == nlohmann::ordered_json::array({{0, 1}}));
  CHECK(j["visible"][1] == nlohmann::ordered_json::array({{0, 2}}));
  CHECK(j["loss"] == nlohmann::ordered_json::array({1, 1}));
}

// ============================================================================
// Corpus records
// ============================================================================

TEST_CASE("corpus lines parse their required and optional fields") {
  CorpusSample s = CorpusSample::from_json_line(
      R"({"id":"s1","prompt":"p","response":"r","answer":"42"})");
  CHECK(s.id == "s1");
  CHECK(s.prompt == "p");
  CHECK(s.response == "r");
  REQUIRE(s.answer.has_value());
  CHECK(*s.answer == "42");

  CorpusSample bare = CorpusSample::from_json_line(
      R"({"id":"s2","prompt":"p","response":"r"})");
  CHECK_FALSE(bare.answer.has_value());
  CorpusSample null_answer = CorpusSample::from_json_line(
      R"({"id":"s3","prompt":"p","response":"r","answer":null})");
  CHECK_FALSE(null_answer.answer.has_value());

  CHECK_THROWS_AS(CorpusSample::from_json_line("{not json"), ValidationError);
  CHECK_THROWS_AS(CorpusSample::from_json_line(R"({"id":"x","prompt":"p"})"),
                  ValidationError);

  CHECK(s.to_json().dump() ==
        R"({"id":"s1","prompt":"p","response":"r","answer":"42"})");
  CHECK(bare.to_json().dump() == R"({"id":"s2","prompt":"p","response":"r"})");
}

// ============================================================================
// The curation pipeline
// ============================================================================

TEST_CASE("the pipeline parallelizes item runs and reports their metrics") {
  std::vector<CorpusSample> samples{make_sample(
      "s1", "Steps:\n- Mix: stir the batter\n- Bake: heat the oven\nDone")};
  MockJudge judge;
  PipelineOutcome outcome = run_pipeline(samples, judge, PipelineConfig{});

  REQUIRE(outcome.samples.size() == 1);
  const CuratedSample& curated = outcome.samples[0];
  CHECK(curated.id == "s1");
  CHECK(curated.verdict == Verdict::Pass);
  CHECK(curated.groups == 1);
  CHECK(curated.dp == doctest::Approx(43.0 / 66.0));
  REQUIRE(curated.abn.has_value());
  CHECK(*curated.abn == doctest::Approx(2.0));
  CHECK(outcome.parallel_samples == 1);

  CHECK(serialize(curated.response) ==
        "Steps:<Title>Mix</Title><Title>Bake</Title><Para>"
        "<Branch>Mix: stir the batter</Branch>"
        "<Branch>Bake: heat the oven</Branch></Para>Done");
  CHECK(serialize(curated.serial_twin) ==
        "Steps:stir the batter\nheat the ovenDone");

  nlohmann::ordered_json report = outcome.report();
  CHECK(report["samples"] == 1);
  CHECK(report["parallel_samples"] == 1);
  CHECK(report["verdicts"]["pass"] == 1);
  CHECK(report["verdicts"]["judge_fail"] == 0);
  CHECK(report["verdicts"]["structural_fail"] == 0);
  CHECK(report["metrics"]["ppd"] == 1.0);
}

TEST_CASE("a preserved answer keeps the parallel candidate") {
  std::vector<CorpusSample> samples{make_sample(
      "s1", "Steps:\n- Mix: stir the batter\n- Bake: heat the oven\nDone")};
  samples[0].answer = "the oven";
  MockJudge judge;
  PipelineOutcome outcome = run_pipeline(samples, judge, PipelineConfig{});
  CHECK(outcome.samples[0].verdict == Verdict::Pass);
  CHECK(outcome.samples[0].groups == 1);
  REQUIRE(outcome.samples[0].answer.has_value());
  CHECK(*outcome.samples[0].answer == "the oven");
}

TEST_CASE("a clobbered answer degrades every candidate to serial") {
  std::vector<CorpusSample> samples{make_sample(
      "s1", "Steps:\n- Mix: stir the batter\n- Bake: heat the oven\nDone")};
  samples[0].answer = "42";  // appears nowhere, so no candidate can keep it
  MockJudge judge;
  PipelineOutcome outcome = run_pipeline(samples, judge, PipelineConfig{});
  const CuratedSample& curated = outcome.samples[0];
  CHECK(curated.verdict == Verdict::JudgeFail);
  CHECK(curated.groups == 0);
  CHECK(curated.dp == 0.0);
  CHECK_FALSE(curated.abn.has_value());
  CHECK(outcome.parallel_samples == 0);
}

TEST_CASE("referencing branches fail independence and degrade") {
  std::vector<CorpusSample> samples{make_sample(
      "s1", "- First: compute the area\n- Second: as above, reuse it\nDone")};
  MockJudge judge;
  PipelineOutcome outcome = run_pipeline(samples, judge, PipelineConfig{});
  const CuratedSample& curated = outcome.samples[0];
  CHECK(curated.verdict == Verdict::JudgeFail);
  CHECK(curated.groups == 0);
  CHECK(serialize(curated.response) ==
        "compute the area\nas above, reuse itDone");
  CHECK(serialize(curated.serial_twin) == serialize(curated.response));
}

TEST_CASE("structurally hopeless rewrites report a structural failure") {
  // Every itemized candidate produces empty branch bodies, which the
  // structural check rejects before any judging happens.
  std::vector<CorpusSample> samples{
      make_sample("s1", "- Mix: \n- Bake: \nEnd")};
  MockJudge judge;
  PipelineOutcome outcome = run_pipeline(samples, judge, PipelineConfig{});
  const CuratedSample& curated = outcome.samples[0];
  CHECK(curated.verdict == Verdict::StructuralFail);
  CHECK(curated.groups == 0);
  CHECK(serialize(curated.response) == "\nEnd");
}

TEST_CASE("responses with nothing to parallelize still pass") {
  std::vector<CorpusSample> samples{
      make_sample("s1", "Just a plain explanation with no items.")};
  MockJudge judge;
  PipelineOutcome outcome = run_pipeline(samples, judge, PipelineConfig{});
  const CuratedSample& curated = outcome.samples[0];
  CHECK(curated.verdict == Verdict::Pass);
  CHECK(curated.groups == 0);
  CHECK(curated.dp == 0.0);
  CHECK(outcome.parallel_samples == 0);
  CHECK(serialize(curated.response) == samples[0].response);
  CHECK(serialize(curated.serial_twin) == samples[0].response);
}

TEST_CASE("stray markers in raw responses are stripped before rewriting") {
  std::vector<CorpusSample> samples{
      make_sample("s1", "Take </Para> care <Branch>of this.")};
  MockJudge judge;
  PipelineOutcome outcome = run_pipeline(samples, judge, PipelineConfig{});
  CHECK(serialize(outcome.samples[0].response) == "Take  care of this.");
  CHECK(outcome.samples[0].verdict == Verdict::Pass);
}

TEST_CASE("rewrite transport failures fall back to the raw response") {
  std::vector<CorpusSample> samples{make_sample(
      "s1", "Steps:\n- Mix: stir the batter\n- Bake: heat the oven\nDone")};

  SUBCASE("a permanently down rewriter leaves the sample serial") {
    FlakyRewriteJudge judge(1000);
    PipelineOutcome outcome = run_pipeline(samples, judge, PipelineConfig{});
    CHECK(outcome.samples[0].verdict == Verdict::Pass);
    CHECK(outcome.samples[0].groups == 0);
    CHECK(serialize(outcome.samples[0].response) == samples[0].response);
  }
  SUBCASE("one transient failure is retried and the rewrite proceeds") {
    FlakyRewriteJudge judge(1);
    PipelineOutcome outcome = run_pipeline(samples, judge, PipelineConfig{});
    CHECK(outcome.samples[0].verdict == Verdict::Pass);
    CHECK(outcome.samples[0].groups == 1);
  }
}

TEST_CASE("pipeline configuration rejects useless knob values") {
  PipelineConfig config;
  config.rewrite_candidates = 0;
  CHECK_THROWS_AS(config.validate(), ConfigError);
  config = PipelineConfig{};
  config.judge_samples = 0;
  CHECK_THROWS_AS(config.validate(), ConfigError);
  config = PipelineConfig{};
  config.max_retries = -1;
  CHECK_THROWS_AS(config.validate(), ConfigError);
}

TEST_CASE("curated samples render their JSON rows with explicit nulls") {
  std::vector<CorpusSample> samples{
      make_sample("s1", "nothing to split here")};
  MockJudge judge;
  PipelineOutcome outcome = run_pipeline(samples, judge, PipelineConfig{});
  nlohmann::ordered_json j = outcome.samples[0].to_json();
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) {
    keys.push_back(it.key());
  }
  CHECK(keys == std::vector<std::string>{"id", "prompt", "response", "verdict",
                                         "dp", "abn", "groups"});
  CHECK(j["abn"].is_null());
  CHECK(j["verdict"] == "pass");

  nlohmann::ordered_json twin = outcome.samples[0].serial_to_json();
  CHECK(twin ==
        nlohmann::ordered_json({{"id", "s1"},
                                {"prompt", "Explain the procedure."},
                                {"response", "nothing to split here"}}));
}
