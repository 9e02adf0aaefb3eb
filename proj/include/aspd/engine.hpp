#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "aspd/corpus.hpp"
#include "aspd/layout.hpp"
#include "aspd/mask.hpp"
#include "aspd/model.hpp"
#include "aspd/tokenizer.hpp"

namespace aspd {

/// Token selection settings.  Stochastic sampling applies temperature, then
/// keeps the top_k highest logits, then the smallest prefix of those whose
/// probability mass reaches top_p, renormalizes and draws.  Greedy ignores
/// all three and takes the argmax (lowest id wins ties).
struct SamplerConfig {
  enum class Mode { Greedy, Stochastic };

  Mode mode = Mode::Stochastic;
  float temperature = 0.7f;
  int top_k = 20;
  float top_p = 0.8f;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Draw one token id.  `forbidden` ids are excluded before any truncation.
/// Throws SamplingError when nothing remains to sample.
int sample(std::span<const float> logits, const SamplerConfig& config,
           const std::unordered_set<int>& forbidden, std::mt19937_64& rng);

/// Engine limits and decode policy knobs.
struct EngineConfig {
  int max_total_tokens = 1024;   ///< response tokens (prompt excluded)
  int max_branch_tokens = 256;   ///< per branch, including its markers
  int max_titles = 8;            ///< cap on titles collected before <Para>
  VisibilityMode visibility = VisibilityMode::Independent;
  PositionScheme positions{};
  bool forbid_nested_para = true;  ///< mask group markers inside branches

  void validate() const;
};

/// What the policy is told about each newly appended token.
struct PolicyToken {
  TokenMeta meta;       ///< layout bookkeeping (canonical positions)
  int model_position;   ///< position id under the engine's position scheme
  bool forced;          ///< appended by protocol, not sampled
};

/// A source of logits.  The engine appends tokens in simultaneity blocks and
/// calls extend() with everything appended since the previous call; the
/// policy returns one logits row per new token (row i belongs to tokens[i]).
/// Stateful policies (a model with a KV cache) advance their state here.
class GenerativePolicy {
 public:
  virtual ~GenerativePolicy() = default;

  virtual int vocab_size() const = 0;

  virtual std::vector<std::vector<float>> extend(
      std::span<const PolicyToken> tokens,
      std::span<const MaskRow> mask_rows) = 0;

  /// Rearranging position scheme support: drop state from flat index `keep`
  /// onward and re-consume `tokens` (the dropped tail, with fresh model
  /// positions).  Stateless policies ignore this.
  virtual void reassign_positions(std::size_t keep,
                                  std::span<const PolicyToken> tokens,
                                  std::span<const MaskRow> mask_rows) {
    (void)keep;
    (void)tokens;
    (void)mask_rows;
  }
};

/// Policy backed by the toy transformer plus a KV cache.  Optionally records
/// every logits row it returns, keyed by flat index (used by tests to compare
/// a decode trace against a from-scratch full forward pass).
class ModelPolicy : public GenerativePolicy {
 public:
  explicit ModelPolicy(const Model& model, bool record_rows = false);

  int vocab_size() const override { return model_->config().vocab_size; }
  std::vector<std::vector<float>> extend(
      std::span<const PolicyToken> tokens,
      std::span<const MaskRow> mask_rows) override;
  void reassign_positions(std::size_t keep, std::span<const PolicyToken> tokens,
                          std::span<const MaskRow> mask_rows) override;

  const KvCache& cache() const { return cache_; }
  /// Recorded rows in flat order (empty unless record_rows).  Rows replaced
  /// by reassign_positions keep their latest value.
  const std::vector<std::vector<float>>& recorded_rows() const {
    return recorded_;
  }

 private:
  const Model* model_;
  KvCache cache_;
  bool record_;
  std::vector<std::vector<float>> recorded_;
};

/// Policy that replays a known structured response: every returned row is a
/// one-hot(±100) pointing at the next token of the stream the query token
/// belongs to (main stream for serial tokens, the branch's own stream
/// inside a stage).  Survives any sampler configuration, so engine behavior
/// becomes fully deterministic and independently predictable.  Optionally
/// wraps an inner policy whose state advances identically (and whose rows are
/// discarded), which turns wall-clock measurements realistic while keeping
/// token choices scripted.
class ScriptedPolicy : public GenerativePolicy {
 public:
  ScriptedPolicy(const StructuredResponse& response,
                 const ByteTokenizer& tokenizer, std::size_t prompt_len,
                 std::unique_ptr<GenerativePolicy> inner = nullptr);

  int vocab_size() const override;
  std::vector<std::vector<float>> extend(
      std::span<const PolicyToken> tokens,
      std::span<const MaskRow> mask_rows) override;
  void reassign_positions(std::size_t keep, std::span<const PolicyToken> tokens,
                          std::span<const MaskRow> mask_rows) override;

  GenerativePolicy* inner() { return inner_.get(); }

 private:
  struct BranchScript {
    std::vector<int> body;        // branch text tokens plus the closing marker
    std::size_t prefix_len = 0;   // forced tokens before the body
    std::size_t observed = 0;     // branch tokens seen so far
  };

  int peek_target(const TokenMeta& meta) const;
  void observe(const TokenMeta& meta);

  ByteTokenizer tokenizer_;
  std::vector<int> main_;                       // full main-branch stream
  std::size_t main_cursor_ = 0;
  std::size_t prompt_remaining_;
  std::vector<std::vector<BranchScript>> stages_;  // [stage-1][branch-1]
  std::unique_ptr<GenerativePolicy> inner_;
};

/// Counting and timing of one decode call.
struct DecodeResult {
  StructuredResponse transcript;  ///< structural view of the response
  SequenceLayout layout;          ///< full prompt + response layout
  bool truncated = false;         ///< any limit forced an early close

  int step_count = 0;             ///< policy extend() calls
  int sampled_step_count = 0;     ///< blocks holding at least one sampled token
  int parallel_step_count = 0;    ///< sampled blocks inside parallel stages
  int prefill_step_count = 0;     ///< extend() calls with only forced tokens
  int reposition_count = 0;       ///< cache rebuilds (rearranging scheme only)

  int prompt_tokens = 0;
  int response_tokens = 0;
  int serial_tokens = 0;          ///< response tokens on the main branch
  int parallel_tokens = 0;        ///< response tokens inside stages
  int sampled_tokens = 0;
  int forced_tokens = 0;

  double serial_seconds = 0.0;    ///< wall time in serial decode
  double parallel_seconds = 0.0;  ///< wall time inside parallel stages
  double prefill_seconds = 0.0;   ///< wall time in forced-only processing

  /// Stable JSON rendering.  Wall-clock fields are included only when
  /// `with_timings` is set, so default output is byte-identical across runs.
  nlohmann::ordered_json to_json(bool with_timings = false) const;
};

/// Run the hybrid serial/parallel decode loop.
///
/// The engine force-feeds the prompt, then alternates serial sampling with
/// parallel stages.  A stage opens when the main branch samples "<Para>"
/// after one or more complete "<Title>...</Title>" runs: every title spawns a
/// branch whose "<Branch>Title: " prefix is forced, then all open branches
/// advance one token per step in lockstep until each has sampled its closing
/// marker (or hit max_branch_tokens, which forces the close and flags
/// truncation).  When the last branch closes the engine forces "</Para>" and
/// resumes serial sampling.  End-of-sequence closes the current branch inside
/// a stage and ends the response on the main branch.
DecodeResult decode(GenerativePolicy& policy, std::span<const int> prompt,
                    const EngineConfig& engine_config,
                    const SamplerConfig& sampler_config);

}  // namespace aspd
