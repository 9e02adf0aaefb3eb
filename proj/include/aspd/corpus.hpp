#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "aspd/layout.hpp"
#include "aspd/mask.hpp"
#include "aspd/tokenizer.hpp"

namespace aspd {

/// One parallel group: the titles announced ahead of the group and one branch
/// text per title.  Branch texts carry their full content including the
/// "Title: " prefix that ties them back to their title.
struct ParallelGroup {
  std::vector<std::string> titles;
  std::vector<std::string> branches;

  friend bool operator==(const ParallelGroup&, const ParallelGroup&) = default;
};

/// One segment of a structured response: either a run of plain serial text or
/// a parallel group.
struct ResponseSegment {
  enum class Kind { Serial, Group };

  Kind kind = Kind::Serial;
  std::string text;     ///< Serial segments only
  ParallelGroup group;  ///< Group segments only

  static ResponseSegment serial(std::string t) {
    ResponseSegment s;
    s.kind = Kind::Serial;
    s.text = std::move(t);
    return s;
  }
  static ResponseSegment parallel(ParallelGroup g) {
    ResponseSegment s;
    s.kind = Kind::Group;
    s.group = std::move(g);
    return s;
  }

  friend bool operator==(const ResponseSegment&, const ResponseSegment&) = default;
};

/// A response split into alternating serial text and parallel groups.
/// Serial segments are always non-empty and never adjacent to one another
/// (construction and parsing both normalize), so serialize/parse round-trips
/// are exact.
struct StructuredResponse {
  std::vector<ResponseSegment> segments;

  void push_serial(std::string text);  ///< no-op on empty, merges with a
                                       ///< preceding serial segment
  void push_group(ParallelGroup group);

  bool has_group() const;
  std::size_t group_count() const;

  friend bool operator==(const StructuredResponse&, const StructuredResponse&) =
      default;
};

/// Parse a tagged string into segments.
///
/// Grammar (markers are single tokens, everything else is text):
///   response := (serial_text | group)*
///   group    := title+ "<Para>" branch{n} "</Para>"     (n == title count)
///   title    := "<Title>" text "</Title>"
///   branch   := "<Branch>" text "</Branch>"
///
/// Titles must be immediately followed by more titles or "<Para>"; no text is
/// allowed between branches, before the first branch, or after the last one.
/// Nested groups are rejected.  Throws ParseError carrying the byte offset
/// and a description of what was expected.
StructuredResponse parse_tagged(std::string_view text);

/// Render segments back to the tagged string form.  parse_tagged(serialize(r))
/// == r for every well-formed response.
std::string serialize(const StructuredResponse& response);

/// Stages of the curation pipeline that consult a judge.
enum class JudgeStage { Rewriting, Independence, IntegrityAnswer };

/// Verdict for one group or one whole sample.
enum class Verdict { Pass, StructuralFail, JudgeFail };

std::string verdict_name(Verdict v);

struct GroupVerdict {
  std::size_t group_index = 0;
  Verdict verdict = Verdict::Pass;
  std::string reason;                ///< empty when verdict == Pass
  std::vector<bool> votes;           ///< raw judge votes, when a judge ran
};

struct ValidationReport {
  std::vector<GroupVerdict> groups;

  bool all_pass() const {
    for (const GroupVerdict& g : groups) {
      if (g.verdict != Verdict::Pass) return false;
    }
    return true;
  }
};

/// Structural checks that need no judge: title/branch count agreement,
/// "Title: " prefix agreement, non-empty branch bodies, no stray markers
/// inside texts.
ValidationReport validate_integrity(const StructuredResponse& response);

/// A judge transport: returns one boolean vote (or, for Rewriting, a rewrite
/// candidate).  Implementations may fail transiently by throwing
/// JudgeTransportError; callers retry up to their budget.
class JudgeClient {
 public:
  virtual ~JudgeClient() = default;

  /// Yes/no judgment of `payload` under `stage`.  `sample_index` selects the
  /// vote when the same payload is judged several times.
  virtual bool judge(JudgeStage stage, const std::string& payload,
                     int sample_index) = 0;

  /// Rewriting stage: produce candidate `sample_index` for a raw response.
  virtual std::string rewrite(const std::string& prompt,
                              const std::string& response, int sample_index) = 0;
};

/// Deterministic local judge used by tests and the command-line pipeline.
/// All decisions are pure functions of the payload and sample index.
class MockJudge : public JudgeClient {
 public:
  bool judge(JudgeStage stage, const std::string& payload,
             int sample_index) override;
  std::string rewrite(const std::string& prompt, const std::string& response,
                      int sample_index) override;
};

/// One unanimous judged decision: `samples` votes on one payload.  Every vote
/// retries transport errors up to `max_retries` times; a vote that still
/// cannot be obtained marks the decision JudgeFail, as does any dissenting
/// vote.  Pass requires every vote to be yes.
GroupVerdict unanimous_votes(JudgeStage stage, const std::string& payload,
                             JudgeClient& judge, int samples, int max_retries);

/// Ask the judge about every group of `response` (payload: the group's
/// branch texts); a group passes only if every one of `samples` votes agrees.
ValidationReport judged_stage(const StructuredResponse& response,
                              JudgeStage stage, JudgeClient& judge, int samples,
                              int max_retries);

/// Collapse group `group_index` into a serial segment: branch bodies joined
/// with "\n" after stripping their "Title: " prefixes; titles and markers
/// vanish.  Adjacent serial segments merge.
StructuredResponse degenerate(const StructuredResponse& response,
                              std::size_t group_index);

/// Collapse every group.
StructuredResponse degenerate_all(const StructuredResponse& response);

/// Pick the preferred candidate: highest parallel-token share first, then
/// highest mean branch count, then lowest index.  Returns the index.
std::size_t select_preferred(std::span<const StructuredResponse> candidates);

/// Decode-time layout of a training example: tokens in branch-contiguous
/// order, shared position ids, full attention mask (decode-time visibility)
/// and a loss flag per token.
struct TrainingExample {
  std::vector<int> tokens;
  std::vector<int> positions;
  AttentionMask mask;
  std::vector<std::uint8_t> loss;  ///< 1 where the training loss applies

  nlohmann::ordered_json to_json() const;
};

/// Build the training layout for a response: serial segments and group
/// scaffolding in natural order, branch tokens contiguous per branch, with
/// the attention pattern and positions the decode engine would have used.
/// Every response token carries loss.
TrainingExample emit_training_layout(const StructuredResponse& response,
                                     const ByteTokenizer& tokenizer,
                                     VisibilityMode mode = VisibilityMode::Independent);

/// One raw corpus record.
struct CorpusSample {
  std::string id;
  std::string prompt;
  std::string response;
  std::optional<std::string> answer;

  static CorpusSample from_json_line(const std::string& line);
  nlohmann::ordered_json to_json() const;
};

/// Pipeline tuning knobs.
struct PipelineConfig {
  int rewrite_candidates = 3;  ///< parallel rewrites requested per sample
  int judge_samples = 3;       ///< votes per judged decision
  int max_retries = 2;         ///< transport retries per vote
  void validate() const;
};

/// Result of curating one sample.
struct CuratedSample {
  std::string id;
  std::string prompt;
  StructuredResponse response;        ///< selected candidate
  StructuredResponse serial_twin;     ///< same content, all groups collapsed
  Verdict verdict = Verdict::Pass;    ///< Pass when any parallel group survived
  double dp = 0.0;
  std::optional<double> abn;
  std::size_t groups = 0;
  std::optional<std::string> answer;

  nlohmann::ordered_json to_json() const;
  nlohmann::ordered_json serial_to_json() const;
};

/// Outcome of a whole pipeline run.
struct PipelineOutcome {
  std::vector<CuratedSample> samples;
  int parallel_samples = 0;  ///< samples whose selected candidate has a group

  nlohmann::ordered_json report() const;
};

/// Run the four-stage curation pipeline over raw samples: rewrite into
/// candidates, check branch independence (judged, unanimous), check content
/// integrity and answer preservation, then select the preferred candidate.
/// A sample whose every candidate fails degrades to its serial form rather
/// than being dropped.  Deterministic for a deterministic judge.
PipelineOutcome run_pipeline(std::span<const CorpusSample> samples,
                             JudgeClient& judge, const PipelineConfig& config);

}  // namespace aspd
