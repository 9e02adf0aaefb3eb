#pragma once

#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "aspd/corpus.hpp"
#include "aspd/engine.hpp"
#include "aspd/tokenizer.hpp"

namespace aspd {

struct MetricsOptions {
  /// Weight each stage's branch count by the tokens it holds instead of
  /// counting every stage once.
  bool token_weighted_abn = false;
};

/// Parallelism profile of one structured response.  Token counts follow the
/// tokenizer: group scaffolding (title runs and the group markers) counts as
/// main-branch tokens, branch markers and branch text count as parallel.
struct SampleMetrics {
  int total_tokens = 0;
  int parallel_tokens = 0;
  double dp = 0.0;                      ///< parallel share of all tokens
  std::vector<int> stage_branch_counts;
  std::optional<double> abn;            ///< mean branches per stage; absent
                                        ///< when there is no stage
  bool is_parallel = false;             ///< has a group with >= 2 branches

  nlohmann::ordered_json to_json() const;
};

SampleMetrics sample_metrics(const StructuredResponse& response,
                             const ByteTokenizer& tokenizer,
                             const MetricsOptions& options = {});

/// Same metrics computed from an engine layout (response tokens only, the
/// prompt is excluded).  Equal to the transcript-based numbers whenever no
/// degraded title run occurred.
SampleMetrics layout_metrics(const SequenceLayout& layout, int prompt_tokens,
                             const MetricsOptions& options = {});

/// Corpus-level aggregation.
struct CorpusMetrics {
  int samples = 0;
  int parallel_samples = 0;
  double ppd = 0.0;                  ///< share of parallel samples
  std::optional<double> mean_dp;     ///< absent on an empty corpus
  std::optional<double> mean_abn;    ///< mean over samples that have stages

  nlohmann::ordered_json to_json() const;
};

CorpusMetrics corpus_metrics(std::span<const SampleMetrics> samples);

/// Throughput view of one decode.  Wall-clock rates are absent when the
/// corresponding duration is zero (step counts stay exact regardless).
struct ThroughputMetrics {
  int sampled_tokens = 0;
  int sampled_steps = 0;
  int baseline_steps = 0;         ///< serial decode would need this many
  double step_speedup = 0.0;      ///< baseline_steps / sampled_steps
  std::optional<double> tokens_per_second;
  std::optional<double> parallel_tokens_per_second;

  nlohmann::ordered_json to_json() const;
};

/// Derive throughput from a decode result.  The baseline is the number of
/// steps a purely serial decode of the same content would take: one per
/// sampled token.
ThroughputMetrics throughput_metrics(const DecodeResult& result);

}  // namespace aspd
