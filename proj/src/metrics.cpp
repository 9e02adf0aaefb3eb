#include "aspd/metrics.hpp"

#include <map>

#include "aspd/errors.hpp"

namespace aspd {

namespace {

struct StageTally {
  int branches = 0;
  int tokens = 0;
};

SampleMetrics finish(int total, int parallel, std::vector<StageTally> stages,
                     const MetricsOptions& options) {
  SampleMetrics m;
  m.total_tokens = total;
  m.parallel_tokens = parallel;
  m.dp = total > 0 ? static_cast<double>(parallel) / total : 0.0;
  for (const StageTally& s : stages) {
    m.stage_branch_counts.push_back(s.branches);
    m.is_parallel = m.is_parallel || s.branches >= 2;
  }
  if (!stages.empty()) {
    if (options.token_weighted_abn) {
      long long weighted = 0;
      long long weight = 0;
      for (const StageTally& s : stages) {
        weighted += static_cast<long long>(s.branches) * s.tokens;
        weight += s.tokens;
      }
      m.abn = weight > 0 ? static_cast<double>(weighted) / weight : 0.0;
    } else {
      long long sum = 0;
      for (const StageTally& s : stages) {
        sum += s.branches;
      }
      m.abn = static_cast<double>(sum) / stages.size();
    }
  }
  return m;
}

}  // namespace

SampleMetrics sample_metrics(const StructuredResponse& response,
                             const ByteTokenizer& tokenizer,
                             const MetricsOptions& options) {
  int total = 0;
  int parallel = 0;
  std::vector<StageTally> stages;

  for (const ResponseSegment& seg : response.segments) {
    if (seg.kind == ResponseSegment::Kind::Serial) {
      total += static_cast<int>(tokenizer.encode(seg.text).size());
      continue;
    }
    const ParallelGroup& group = seg.group;
    // Title runs and the group markers decode on the main branch.
    for (const std::string& title : group.titles) {
      total += 2 + static_cast<int>(tokenizer.encode(title).size());
    }
    total += 2;  // group open and close markers

    StageTally tally;
    tally.branches = static_cast<int>(group.branches.size());
    for (const std::string& branch : group.branches) {
      int tokens = 2 + static_cast<int>(tokenizer.encode(branch).size());
      tally.tokens += tokens;
      parallel += tokens;
      total += tokens;
    }
    stages.push_back(tally);
  }
  return finish(total, parallel, std::move(stages), options);
}

SampleMetrics layout_metrics(const SequenceLayout& layout, int prompt_tokens,
                             const MetricsOptions& options) {
  const std::vector<TokenMeta>& flat = layout.flattened();
  if (prompt_tokens < 0 ||
      static_cast<std::size_t>(prompt_tokens) > flat.size()) {
    throw ValidationError("prompt token count exceeds the layout");
  }
  int total = 0;
  int parallel = 0;
  std::map<int, StageTally> stage_tokens;
  for (std::size_t i = static_cast<std::size_t>(prompt_tokens); i < flat.size();
       ++i) {
    const TokenMeta& meta = flat[i];
    ++total;
    if (meta.stage > 0) {
      ++parallel;
      ++stage_tokens[meta.stage].tokens;
    }
  }
  std::vector<StageTally> stages;
  for (auto& [stage, tally] : stage_tokens) {
    tally.branches = layout.stage_info(stage).branch_count;
    stages.push_back(tally);
  }
  return finish(total, parallel, std::move(stages), options);
}

nlohmann::ordered_json SampleMetrics::to_json() const {
  nlohmann::ordered_json j;
  j["total_tokens"] = total_tokens;
  j["parallel_tokens"] = parallel_tokens;
  j["dp"] = dp;
  j["stage_branch_counts"] = stage_branch_counts;
  if (abn) {
    j["abn"] = *abn;
  } else {
    j["abn"] = nullptr;
  }
  j["is_parallel"] = is_parallel;
  return j;
}

CorpusMetrics corpus_metrics(std::span<const SampleMetrics> samples) {
  CorpusMetrics c;
  c.samples = static_cast<int>(samples.size());
  double dp_sum = 0.0;
  double abn_sum = 0.0;
  int abn_count = 0;
  for (const SampleMetrics& s : samples) {
    if (s.is_parallel) {
      ++c.parallel_samples;
    }
    dp_sum += s.dp;
    if (s.abn) {
      abn_sum += *s.abn;
      ++abn_count;
    }
  }
  if (c.samples > 0) {
    c.ppd = static_cast<double>(c.parallel_samples) / c.samples;
    c.mean_dp = dp_sum / c.samples;
  }
  if (abn_count > 0) {
    c.mean_abn = abn_sum / abn_count;
  }
  return c;
}

nlohmann::ordered_json CorpusMetrics::to_json() const {
  nlohmann::ordered_json j;
  j["samples"] = samples;
  j["parallel_samples"] = parallel_samples;
  j["ppd"] = ppd;
  if (mean_dp) {
    j["mean_dp"] = *mean_dp;
  } else {
    j["mean_dp"] = nullptr;
  }
  if (mean_abn) {
    j["mean_abn"] = *mean_abn;
  } else {
    j["mean_abn"] = nullptr;
  }
  return j;
}

ThroughputMetrics throughput_metrics(const DecodeResult& result) {
  ThroughputMetrics t;
  t.sampled_tokens = result.sampled_tokens;
  t.sampled_steps = result.sampled_step_count;
  t.baseline_steps = result.sampled_tokens;
  if (t.sampled_steps > 0) {
    t.step_speedup = static_cast<double>(t.baseline_steps) / t.sampled_steps;
  }
  double total_seconds =
      result.serial_seconds + result.parallel_seconds + result.prefill_seconds;
  if (total_seconds > 0.0 && result.response_tokens > 0) {
    t.tokens_per_second = result.response_tokens / total_seconds;
  }
  if (result.parallel_seconds > 0.0 && result.parallel_tokens > 0) {
    t.parallel_tokens_per_second =
        result.parallel_tokens / result.parallel_seconds;
  }
  return t;
}

nlohmann::ordered_json ThroughputMetrics::to_json() const {
  nlohmann::ordered_json j;
  j["sampled_tokens"] = sampled_tokens;
  j["sampled_steps"] = sampled_steps;
  j["baseline_steps"] = baseline_steps;
  j["step_speedup"] = step_speedup;
  if (tokens_per_second) {
    j["tokens_per_second"] = *tokens_per_second;
  } else {
    j["tokens_per_second"] = nullptr;
  }
  if (parallel_tokens_per_second) {
    j["parallel_tokens_per_second"] = *parallel_tokens_per_second;
  } else {
    j["parallel_tokens_per_second"] = nullptr;
  }
  return j;
}

}  // namespace aspd
