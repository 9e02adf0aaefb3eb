#include "aspd/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>

#include "aspd/errors.hpp"
#include "aspd/metrics.hpp"

namespace aspd {

namespace {

constexpr std::array<std::string_view, 6> kMarkers = {
    "<Title>", "</Title>", "<Branch>", "</Branch>", "<Para>", "</Para>"};
enum MarkerId {
  kTitleOpen = 0,
  kTitleClose,
  kBranchOpen,
  kBranchClose,
  kParaOpen,
  kParaClose,
  kNoMarker = -1
};

// Next marker occurrence at or after `from`: (offset, marker id).
std::pair<std::size_t, int> find_marker(std::string_view text, std::size_t from) {
  for (std::size_t i = from; i < text.size(); ++i) {
    if (text[i] != '<') {
      continue;
    }
    for (int m = 0; m < static_cast<int>(kMarkers.size()); ++m) {
      if (text.substr(i, kMarkers[static_cast<std::size_t>(m)].size()) ==
          kMarkers[static_cast<std::size_t>(m)]) {
        return {i, m};
      }
    }
  }
  return {text.size(), kNoMarker};
}

bool contains_marker(std::string_view text) {
  return find_marker(text, 0).second != kNoMarker;
}

std::string lowercase(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// StructuredResponse

void StructuredResponse::push_serial(std::string text) {
  if (text.empty()) {
    return;
  }
  if (!segments.empty() && segments.back().kind == ResponseSegment::Kind::Serial) {
    segments.back().text += text;
    return;
  }
  segments.push_back(ResponseSegment::serial(std::move(text)));
}

void StructuredResponse::push_group(ParallelGroup group) {
  segments.push_back(ResponseSegment::parallel(std::move(group)));
}

bool StructuredResponse::has_group() const {
  for (const ResponseSegment& seg : segments) {
    if (seg.kind == ResponseSegment::Kind::Group) return true;
  }
  return false;
}

std::size_t StructuredResponse::group_count() const {
  std::size_t n = 0;
  for (const ResponseSegment& seg : segments) {
    if (seg.kind == ResponseSegment::Kind::Group) ++n;
  }
  return n;
}

// ---------------------------------------------------------------------------
// Parse / serialize

StructuredResponse parse_tagged(std::string_view text) {
  StructuredResponse out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto [mpos, marker] = find_marker(text, pos);
    if (mpos > pos) {
      out.push_serial(std::string(text.substr(pos, mpos - pos)));
      pos = mpos;
    }
    if (marker == kNoMarker) {
      break;
    }
    if (marker != kTitleOpen) {
      throw ParseError(mpos, "text or \"<Title>\"");
    }

    // A title run followed by its group.
    ParallelGroup group;
    while (true) {
      pos = mpos + kMarkers[kTitleOpen].size();
      auto [tpos, tmarker] = find_marker(text, pos);
      if (tmarker != kTitleClose) {
        throw ParseError(tmarker == kNoMarker ? text.size() : tpos,
                         "\"</Title>\"");
      }
      group.titles.push_back(std::string(text.substr(pos, tpos - pos)));
      pos = tpos + kMarkers[kTitleClose].size();

      auto [npos, nmarker] = find_marker(text, pos);
      if (npos != pos || (nmarker != kTitleOpen && nmarker != kParaOpen)) {
        throw ParseError(pos, "\"<Title>\" or \"<Para>\"");
      }
      if (nmarker == kParaOpen) {
        pos += kMarkers[kParaOpen].size();
        break;
      }
      mpos = npos;  // next title
    }

    for (std::size_t b = 0; b < group.titles.size(); ++b) {
      auto [bpos, bmarker] = find_marker(text, pos);
      if (bpos != pos || bmarker != kBranchOpen) {
        throw ParseError(pos, "\"<Branch>\"");
      }
      pos += kMarkers[kBranchOpen].size();
      auto [epos, emarker] = find_marker(text, pos);
      if (emarker != kBranchClose) {
        throw ParseError(emarker == kNoMarker ? text.size() : epos,
                         "\"</Branch>\"");
      }
      group.branches.push_back(std::string(text.substr(pos, epos - pos)));
      pos = epos + kMarkers[kBranchClose].size();
    }

    auto [cpos, cmarker] = find_marker(text, pos);
    if (cpos != pos || cmarker != kParaClose) {
      throw ParseError(pos, "\"</Para>\" after " +
                                std::to_string(group.titles.size()) +
                                " branches (one per title)");
    }
    pos += kMarkers[kParaClose].size();
    out.push_group(std::move(group));
  }
  return out;
}

std::string serialize(const StructuredResponse& response) {
  std::string out;
  for (const ResponseSegment& seg : response.segments) {
    if (seg.kind == ResponseSegment::Kind::Serial) {
      out += seg.text;
      continue;
    }
    for (const std::string& title : seg.group.titles) {
      out += kMarkers[kTitleOpen];
      out += title;
      out += kMarkers[kTitleClose];
    }
    out += kMarkers[kParaOpen];
    for (const std::string& branch : seg.group.branches) {
      out += kMarkers[kBranchOpen];
      out += branch;
      out += kMarkers[kBranchClose];
    }
    out += kMarkers[kParaClose];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Validation

std::string verdict_name(Verdict v) {
  switch (v) {
    case Verdict::Pass: return "pass";
    case Verdict::StructuralFail: return "structural_fail";
    case Verdict::JudgeFail: return "judge_fail";
  }
  return "unknown";
}

ValidationReport validate_integrity(const StructuredResponse& response) {
  ValidationReport report;
  std::size_t group_index = 0;
  for (const ResponseSegment& seg : response.segments) {
    if (seg.kind == ResponseSegment::Kind::Serial) {
      continue;
    }
    const ParallelGroup& group = seg.group;
    GroupVerdict verdict;
    verdict.group_index = group_index++;
    auto fail = [&verdict](const std::string& reason) {
      if (verdict.verdict == Verdict::Pass) {
        verdict.verdict = Verdict::StructuralFail;
        verdict.reason = reason;
      }
    };

    if (group.titles.empty()) {
      fail("group has no titles");
    }
    if (group.titles.size() != group.branches.size()) {
      fail("group has " + std::to_string(group.titles.size()) + " titles but " +
           std::to_string(group.branches.size()) + " branches");
    }
    for (std::size_t i = 0;
         i < std::min(group.titles.size(), group.branches.size()); ++i) {
      const std::string& title = group.titles[i];
      const std::string& branch = group.branches[i];
      std::string prefix = title + ": ";
      if (contains_marker(title)) {
        fail("title " + std::to_string(i + 1) + " contains a marker");
      }
      if (contains_marker(branch)) {
        fail("branch " + std::to_string(i + 1) + " contains a marker");
      }
      if (branch.rfind(prefix, 0) != 0) {
        fail("branch " + std::to_string(i + 1) +
             " does not start with its \"Title: \" prefix");
      } else if (branch.size() == prefix.size()) {
        fail("branch " + std::to_string(i + 1) + " has an empty body");
      }
    }
    report.groups.push_back(std::move(verdict));
  }
  return report;
}

GroupVerdict unanimous_votes(JudgeStage stage, const std::string& payload,
                             JudgeClient& judge, int samples, int max_retries) {
  GroupVerdict verdict;
  for (int s = 0; s < samples; ++s) {
    bool vote = false;
    bool obtained = false;
    for (int attempt = 0; attempt <= max_retries; ++attempt) {
      try {
        vote = judge.judge(stage, payload, s);
        obtained = true;
        break;
      } catch (const JudgeTransportError&) {
        // retry
      }
    }
    if (!obtained) {
      verdict.verdict = Verdict::JudgeFail;
      verdict.reason = "vote " + std::to_string(s + 1) +
                       " unavailable after " + std::to_string(max_retries + 1) +
                       " attempts";
      return verdict;
    }
    verdict.votes.push_back(vote);
  }
  for (std::size_t s = 0; s < verdict.votes.size(); ++s) {
    if (!verdict.votes[s]) {
      verdict.verdict = Verdict::JudgeFail;
      verdict.reason = "vote " + std::to_string(s + 1) + " of " +
                       std::to_string(samples) + " dissented";
      return verdict;
    }
  }
  verdict.verdict = Verdict::Pass;
  return verdict;
}

ValidationReport judged_stage(const StructuredResponse& response,
                              JudgeStage stage, JudgeClient& judge, int samples,
                              int max_retries) {
  ValidationReport report;
  std::size_t group_index = 0;
  for (const ResponseSegment& seg : response.segments) {
    if (seg.kind != ResponseSegment::Kind::Group) {
      continue;
    }
    std::string payload;
    for (std::size_t i = 0; i < seg.group.branches.size(); ++i) {
      if (i > 0) payload += "\n---\n";
      payload += seg.group.branches[i];
    }
    GroupVerdict verdict =
        unanimous_votes(stage, payload, judge, samples, max_retries);
    verdict.group_index = group_index++;
    report.groups.push_back(std::move(verdict));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Degeneration and selection

namespace {

std::string collapse_group(const ParallelGroup& group) {
  std::string out;
  for (std::size_t i = 0; i < group.branches.size(); ++i) {
    if (i > 0) out += "\n";
    const std::string& branch = group.branches[i];
    if (i < group.titles.size()) {
      std::string prefix = group.titles[i] + ": ";
      if (branch.rfind(prefix, 0) == 0) {
        out += branch.substr(prefix.size());
        continue;
      }
    }
    out += branch;
  }
  return out;
}

}  // namespace

StructuredResponse degenerate(const StructuredResponse& response,
                              std::size_t group_index) {
  StructuredResponse out;
  std::size_t gi = 0;
  bool found = false;
  for (const ResponseSegment& seg : response.segments) {
    if (seg.kind == ResponseSegment::Kind::Serial) {
      out.push_serial(seg.text);
      continue;
    }
    if (gi++ == group_index) {
      out.push_serial(collapse_group(seg.group));
      found = true;
    } else {
      out.push_group(seg.group);
    }
  }
  if (!found) {
    throw ValidationError("response has no group " + std::to_string(group_index));
  }
  return out;
}

StructuredResponse degenerate_all(const StructuredResponse& response) {
  StructuredResponse out;
  for (const ResponseSegment& seg : response.segments) {
    if (seg.kind == ResponseSegment::Kind::Serial) {
      out.push_serial(seg.text);
    } else {
      out.push_serial(collapse_group(seg.group));
    }
  }
  return out;
}

std::size_t select_preferred(std::span<const StructuredResponse> candidates) {
  if (candidates.empty()) {
    throw ValidationError("nothing to select from");
  }
  ByteTokenizer tokenizer;
  std::size_t best = 0;
  double best_dp = -1.0;
  double best_abn = -1.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    SampleMetrics m = sample_metrics(candidates[i], tokenizer);
    double abn = m.abn.value_or(-1.0);
    if (m.dp > best_dp || (m.dp == best_dp && abn > best_abn)) {
      best = i;
      best_dp = m.dp;
      best_abn = abn;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Mock judge

bool MockJudge::judge(JudgeStage stage, const std::string& payload,
                      int sample_index) {
  (void)sample_index;  // decisions are pure functions of the payload
  switch (stage) {
    case JudgeStage::Rewriting:
      return true;
    case JudgeStage::Independence: {
      std::string lower = lowercase(payload);
      for (const char* needle :
           {"as above", "previously", "aforementioned", "see above"}) {
        if (lower.find(needle) != std::string::npos) {
          return false;
        }
      }
      return true;
    }
    case JudgeStage::IntegrityAnswer: {
      // Payload is "original\n<<<>>>\ncandidate"; every original word of six
      // or more characters must reappear in the candidate.
      static constexpr std::string_view kSep = "\n<<<>>>\n";
      std::size_t sep = payload.find(kSep);
      if (sep == std::string::npos) {
        return false;
      }
      std::string original = lowercase(payload.substr(0, sep));
      std::string candidate = lowercase(payload.substr(sep + kSep.size()));
      std::size_t i = 0;
      while (i < original.size()) {
        while (i < original.size() &&
               !std::isalnum(static_cast<unsigned char>(original[i]))) {
          ++i;
        }
        std::size_t start = i;
        while (i < original.size() &&
               std::isalnum(static_cast<unsigned char>(original[i]))) {
          ++i;
        }
        if (i - start >= 6 &&
            candidate.find(original.substr(start, i - start)) ==
                std::string::npos) {
          return false;
        }
      }
      return true;
    }
  }
  return false;
}

std::string MockJudge::rewrite(const std::string& prompt,
                               const std::string& response, int sample_index) {
  (void)prompt;
  int variant = sample_index % 3;
  if (variant == 2) {
    return response;  // one candidate always stays serial
  }
  std::size_t min_run = variant == 0 ? 2 : 3;

  // Split into lines; consecutive "- " items of at least min_run become one
  // parallel group, everything else stays serial.
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= response.size()) {
    std::size_t end = response.find('\n', start);
    if (end == std::string::npos) {
      lines.push_back(response.substr(start));
      break;
    }
    lines.push_back(response.substr(start, end - start));
    start = end + 1;
  }

  std::string out;
  std::string serial;
  bool serial_has_lines = false;
  auto push_serial_line = [&](const std::string& line) {
    if (serial_has_lines) serial += "\n";
    serial += line;
    serial_has_lines = true;
  };
  auto flush_serial = [&] {
    out += serial;
    serial.clear();
    serial_has_lines = false;
  };
  std::size_t i = 0;
  bool any_group = false;
  while (i < lines.size()) {
    std::size_t run_end = i;
    while (run_end < lines.size() && lines[run_end].rfind("- ", 0) == 0) {
      ++run_end;
    }
    if (run_end - i < min_run) {
      // Too short to parallelize (or not an item run at all): emit the line —
      // item runs below the threshold stay serial line by line.
      push_serial_line(lines[i]);
      ++i;
      continue;
    }
    flush_serial();
    std::string titles;
    std::string branches;
    for (std::size_t j = i; j < run_end; ++j) {
      std::string item = lines[j].substr(2);
      std::size_t colon = item.find(": ");
      std::string title;
      std::string branch;
      if (colon != std::string::npos && colon > 0 && colon <= 48) {
        title = item.substr(0, colon);
        branch = item;  // already "Title: body"
      } else {
        title = "Item " + std::to_string(j - i + 1);
        branch = title + ": " + item;
      }
      titles += "<Title>" + title + "</Title>";
      branches += "<Branch>" + branch + "</Branch>";
    }
    out += titles + "<Para>" + branches + "</Para>";
    any_group = true;
    i = run_end;
  }
  flush_serial();
  if (!any_group) {
    return response;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training layout

nlohmann::ordered_json TrainingExample::to_json() const {
  nlohmann::ordered_json j;
  j["tokens"] = tokens;
  j["positions"] = positions;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const MaskRow& row : mask.rows()) {
    nlohmann::ordered_json spans = nlohmann::ordered_json::array();
    for (const auto& [begin, end] : row.ranges) {
      spans.push_back({begin, end});  // half-open [begin, end)
    }
    rows.push_back(std::move(spans));
  }
  j["visible"] = std::move(rows);
  j["loss"] = loss;
  return j;
}

TrainingExample emit_training_layout(const StructuredResponse& response,
                                     const ByteTokenizer& tokenizer,
                                     VisibilityMode mode) {
  const SpecialTokens& sp = tokenizer.specials();

  // Build the layout the decoder would produce for this response.
  SequenceLayout layout;
  for (const ResponseSegment& seg : response.segments) {
    if (seg.kind == ResponseSegment::Kind::Serial) {
      for (int id : tokenizer.encode(seg.text)) {
        layout.append_serial(id);
      }
      continue;
    }
    const ParallelGroup& group = seg.group;
    for (const std::string& title : group.titles) {
      layout.append_serial(sp.title_open);
      for (int id : tokenizer.encode(title)) {
        layout.append_serial(id);
      }
      layout.append_serial(sp.title_close);
    }
    layout.append_serial(sp.para_open);

    std::vector<std::vector<int>> streams;
    for (const std::string& branch : group.branches) {
      std::vector<int> stream;
      stream.push_back(sp.branch_open);
      for (int id : tokenizer.encode(branch)) {
        stream.push_back(id);
      }
      stream.push_back(sp.branch_close);
      streams.push_back(std::move(stream));
    }
    layout.open_stage(static_cast<int>(streams.size()));
    std::size_t longest = 0;
    for (const std::vector<int>& s : streams) {
      longest = std::max(longest, s.size());
    }
    for (std::size_t t = 0; t < longest; ++t) {
      std::map<int, int> step;
      for (std::size_t b = 0; b < streams.size(); ++b) {
        if (t < streams[b].size()) {
          step[static_cast<int>(b + 1)] = streams[b][t];
        }
      }
      layout.append_parallel_step(step);
      for (std::size_t b = 0; b < streams.size(); ++b) {
        if (t + 1 == streams[b].size()) {
          layout.close_branch(static_cast<int>(b + 1));
        }
      }
    }
    layout.append_serial(sp.para_close);
  }

  // Training order is branch-contiguous: all of branch 1, then branch 2, …
  // Serial tokens keep their flattened order.
  const std::vector<TokenMeta>& flat = layout.flattened();
  std::vector<std::size_t> order;
  order.reserve(flat.size());
  std::size_t f = 0;
  while (f < flat.size()) {
    if (flat[f].stage == 0) {
      order.push_back(f);
      ++f;
      continue;
    }
    int stage = flat[f].stage;
    std::size_t stage_end = f;
    while (stage_end < flat.size() && flat[stage_end].stage == stage) {
      ++stage_end;
    }
    int max_branch = 0;
    for (std::size_t i = f; i < stage_end; ++i) {
      max_branch = std::max(max_branch, flat[i].branch);
    }
    for (int b = 1; b <= max_branch; ++b) {
      for (std::size_t i = f; i < stage_end; ++i) {
        if (flat[i].branch == b) {
          order.push_back(i);
        }
      }
    }
    f = stage_end;
  }

  TrainingExample example;
  example.tokens.reserve(order.size());
  example.positions.reserve(order.size());
  std::vector<MaskRow> rows;
  rows.reserve(order.size());
  for (std::size_t r = 0; r < order.size(); ++r) {
    const TokenMeta& query = flat[order[r]];
    example.tokens.push_back(query.token_id);
    example.positions.push_back(query.position_id);
    MaskRow row;
    row.width = order.size();
    for (std::size_t c = 0; c < order.size(); ++c) {
      if (visible(query, flat[order[c]], mode)) {
        row.append(c);
      }
    }
    rows.push_back(std::move(row));
  }
  example.mask = AttentionMask(std::move(rows));
  example.loss.assign(order.size(), 1);
  return example;
}

// ---------------------------------------------------------------------------
// Corpus records

CorpusSample CorpusSample::from_json_line(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad corpus line: ") + e.what());
  }
  CorpusSample sample;
  if (!j.contains("id") || !j.contains("prompt") || !j.contains("response")) {
    throw ValidationError("corpus line needs id, prompt and response fields");
  }
  sample.id = j.at("id").get<std::string>();
  sample.prompt = j.at("prompt").get<std::string>();
  sample.response = j.at("response").get<std::string>();
  if (j.contains("answer") && !j.at("answer").is_null()) {
    sample.answer = j.at("answer").get<std::string>();
  }
  return sample;
}

nlohmann::ordered_json CorpusSample::to_json() const {
  nlohmann::ordered_json j;
  j["id"] = id;
  j["prompt"] = prompt;
  j["response"] = response;
  if (answer) {
    j["answer"] = *answer;
  }
  return j;
}

void PipelineConfig::validate() const {
  if (rewrite_candidates < 1) {
    throw ConfigError("rewrite_candidates must be at least 1");
  }
  if (judge_samples < 1) {
    throw ConfigError("judge_samples must be at least 1");
  }
  if (max_retries < 0) {
    throw ConfigError("max_retries must be non-negative");
  }
}

nlohmann::ordered_json CuratedSample::to_json() const {
  nlohmann::ordered_json j;
  j["id"] = id;
  j["prompt"] = prompt;
  j["response"] = serialize(response);
  if (answer) {
    j["answer"] = *answer;
  }
  j["verdict"] = verdict_name(verdict);
  j["dp"] = dp;
  if (abn) {
    j["abn"] = *abn;
  } else {
    j["abn"] = nullptr;
  }
  j["groups"] = groups;
  return j;
}

nlohmann::ordered_json CuratedSample::serial_to_json() const {
  nlohmann::ordered_json j;
  j["id"] = id;
  j["prompt"] = prompt;
  j["response"] = serialize(serial_twin);
  if (answer) {
    j["answer"] = *answer;
  }
  return j;
}

nlohmann::ordered_json PipelineOutcome::report() const {
  std::size_t pass = 0;
  std::size_t judge_fail = 0;
  std::size_t structural_fail = 0;
  for (const CuratedSample& s : samples) {
    switch (s.verdict) {
      case Verdict::Pass: ++pass; break;
      case Verdict::JudgeFail: ++judge_fail; break;
      case Verdict::StructuralFail: ++structural_fail; break;
    }
  }
  std::vector<SampleMetrics> per_sample;
  ByteTokenizer tokenizer;
  per_sample.reserve(samples.size());
  for (const CuratedSample& s : samples) {
    per_sample.push_back(sample_metrics(s.response, tokenizer));
  }
  CorpusMetrics corpus = corpus_metrics(per_sample);

  nlohmann::ordered_json j;
  j["samples"] = samples.size();
  j["parallel_samples"] = parallel_samples;
  j["verdicts"] = {{"pass", pass},
                   {"judge_fail", judge_fail},
                   {"structural_fail", structural_fail}};
  j["metrics"] = corpus.to_json();
  return j;
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

// Remove every protocol marker from raw text so a degraded candidate can
// always be re-serialized and re-parsed.
std::string strip_markers(std::string text) {
  for (std::string_view marker : kMarkers) {
    std::size_t at;
    while ((at = text.find(marker)) != std::string::npos) {
      text.erase(at, marker.size());
    }
  }
  return text;
}

struct CandidateState {
  StructuredResponse response;
  bool judge_degraded = false;
  bool structural_degraded = false;
};

}  // namespace

PipelineOutcome run_pipeline(std::span<const CorpusSample> samples,
                             JudgeClient& judge, const PipelineConfig& config) {
  config.validate();
  PipelineOutcome outcome;
  outcome.samples.resize(samples.size());

  for (std::size_t si = 0; si < samples.size(); ++si) {
    const CorpusSample& sample = samples[si];
    std::string raw = strip_markers(sample.response);

    std::vector<CandidateState> candidates;
    for (int ci = 0; ci < config.rewrite_candidates; ++ci) {
      CandidateState state;
      std::string text = raw;
      for (int attempt = 0; attempt <= config.max_retries; ++attempt) {
        try {
          text = judge.rewrite(sample.prompt, raw, ci);
          break;
        } catch (const JudgeTransportError&) {
          text = raw;  // exhausted retries fall back to the untouched response
        }
      }
      try {
        state.response = parse_tagged(text);
      } catch (const ParseError&) {
        state.response = StructuredResponse{};
        state.response.push_serial(raw);
        state.structural_degraded = true;
      }
      candidates.push_back(std::move(state));
    }

    for (CandidateState& state : candidates) {
      // Malformed groups become serial text before any judging.
      ValidationReport structure = validate_integrity(state.response);
      for (auto it = structure.groups.rbegin(); it != structure.groups.rend();
           ++it) {
        if (it->verdict != Verdict::Pass) {
          state.response = degenerate(state.response, it->group_index);
          state.structural_degraded = true;
        }
      }

      // Branches that lean on each other cannot decode independently.
      ValidationReport independence =
          judged_stage(state.response, JudgeStage::Independence, judge,
                       config.judge_samples, config.max_retries);
      for (auto it = independence.groups.rbegin();
           it != independence.groups.rend(); ++it) {
        if (it->verdict != Verdict::Pass) {
          state.response = degenerate(state.response, it->group_index);
          state.judge_degraded = true;
        }
      }

      // Whole-candidate content check: the rewrite must preserve the answer
      // when one is known, and the original content otherwise.
      bool content_ok = true;
      std::string flat = serialize(state.response);
      if (sample.answer) {
        content_ok = flat.find(*sample.answer) != std::string::npos;
      } else if (state.response.has_group()) {
        std::string payload = raw + "\n<<<>>>\n" + flat;
        GroupVerdict verdict =
            unanimous_votes(JudgeStage::IntegrityAnswer, payload, judge,
                            config.judge_samples, config.max_retries);
        content_ok = verdict.verdict == Verdict::Pass;
      }
      if (!content_ok) {
        state.response = degenerate_all(state.response);
        state.judge_degraded = true;
      }
    }

    std::vector<StructuredResponse> responses;
    responses.reserve(candidates.size());
    for (const CandidateState& state : candidates) {
      responses.push_back(state.response);
    }
    std::size_t chosen = select_preferred(responses);
    const CandidateState& best = candidates[chosen];

    CuratedSample curated;
    curated.id = sample.id;
    curated.prompt = sample.prompt;
    curated.response = best.response;
    curated.serial_twin = degenerate_all(best.response);
    curated.answer = sample.answer;
    if (best.response.has_group()) {
      curated.verdict = Verdict::Pass;
    } else {
      bool any_judge = false;
      bool any_structural = false;
      for (const CandidateState& state : candidates) {
        any_judge = any_judge || state.judge_degraded;
        any_structural = any_structural || state.structural_degraded;
      }
      if (any_judge) {
        curated.verdict = Verdict::JudgeFail;
      } else if (any_structural) {
        curated.verdict = Verdict::StructuralFail;
      } else {
        curated.verdict = Verdict::Pass;  // nothing parallelizable: still fine
      }
    }
    ByteTokenizer tokenizer;
    SampleMetrics metrics = sample_metrics(best.response, tokenizer);
    curated.dp = metrics.dp;
    curated.abn = metrics.abn;
    curated.groups = best.response.group_count();
    if (best.response.has_group()) {
      ++outcome.parallel_samples;
    }
    outcome.samples[si] = std::move(curated);
  }
  return outcome;
}

}  // namespace aspd
