#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "aspd/kernels.hpp"
#include "aspd/mask.hpp"
#include "aspd/tokenizer.hpp"

namespace aspd {

/// How model-facing position ids are assigned to parallel branches (the
/// layout's own position ids always follow the shared scheme; these variants
/// exist for ablation).
///   SameSeq:       branches share the serial numbering — every branch
///                  restarts at the stage start (default).
///   SameMax:       like SameSeq, but the serial stream resumes after the
///                  stage as if the longest branch had been appended once.
///   SameRearrange: like SameSeq during the stage; when the stage closes the
///                  branch tokens are renumbered contiguously branch-by-
///                  branch and their cache entries recomputed.
///   FixedInterval: branch b starts at stage_start + (b-1)*interval; the
///                  serial stream resumes at stage_start + n*interval.
struct PositionScheme {
  enum class Kind { SameSeq, SameMax, SameRearrange, FixedInterval };

  Kind kind = Kind::SameSeq;
  int interval = 0;  ///< required > 0 for FixedInterval, ignored otherwise

  void validate() const;
  std::string name() const;
  static PositionScheme parse(const std::string& name);
};

/// Dimensions and seed of the toy decoder-only transformer.
struct ModelConfig {
  int vocab_size = 263;   ///< >= ByteTokenizer::kMinVocab for text decoding
  int layers = 2;
  int heads = 2;
  int head_dim = 16;      ///< even (rotary pairs); hidden = heads * head_dim
  int ffn_dim = 64;
  int max_positions = 4096;
  std::uint64_t seed = 1;

  int hidden() const { return heads * head_dim; }
  void validate() const;
};

/// Per-layer key/value cache, indexed by flattened causal order.  Entries are
/// append-only for the lifetime of a decode session; the only sanctioned
/// mutation is truncate(), used by the rearranging position scheme to drop a
/// tail before re-running it with fresh positions.
class KvCache {
 public:
  KvCache(int layers, int dim);

  std::size_t len() const { return len_; }
  int dim() const { return dim_; }
  int layers() const { return static_cast<int>(keys_.size()); }

  std::span<const float> keys(int layer) const;
  std::span<const float> values(int layer) const;

  /// Append `count` tokens' worth of keys/values to one layer.
  void append(int layer, std::span<const float> k, std::span<const float> v);
  /// Called once per forward step after all layers appended, with the step's
  /// token count; keeps the per-layer lengths honest.
  void commit(std::size_t count);
  /// Drop every entry from flat index `keep` onward (all layers).
  void truncate(std::size_t keep);

 private:
  int dim_;
  std::size_t len_ = 0;
  std::vector<std::vector<float>> keys_;
  std::vector<std::vector<float>> values_;
};

/// Toy decoder-only transformer (rotary attention + gated-free GELU MLP, RMS
/// norms, float32 throughout) with deterministic seeded initialization.  The
/// six structural marker tokens occupy the six highest vocabulary ids.
class Model {
 public:
  struct LayerWeights {
    std::vector<float> attn_norm, wq, wk, wv, wo, ffn_norm, w1, w2;
  };

  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  SpecialTokens specials() const {
    return SpecialTokens::top_of(config_.vocab_size);
  }

  // Read-only weight access (used by the serial reference path and tests).
  const std::vector<float>& embedding() const { return embedding_; }
  const LayerWeights& layer(int l) const {
    return layers_.at(static_cast<std::size_t>(l));
  }
  const std::vector<float>& final_norm() const { return final_norm_; }
  const std::vector<float>& lm_head() const { return lm_head_; }

  /// Logits for every token of a flattened sequence under an explicit mask
  /// and explicit per-token positions.  Returns [tokens x vocab] row-major.
  std::vector<float> forward_full(std::span<const int> tokens,
                                  std::span<const int> positions,
                                  const AttentionMask& mask) const;

  /// Cache-backed step: append `tokens` (with their positions) to the cache
  /// and return their logits.  `mask_rows` must be one row per new token,
  /// each of width cache.len() + tokens.size(), in flattened order.
  std::vector<float> forward_incremental(KvCache& cache,
                                         std::span<const int> tokens,
                                         std::span<const int> positions,
                                         std::span<const MaskRow> mask_rows) const;

  KvCache make_cache() const { return KvCache(config_.layers, config_.hidden()); }

  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

  /// FNV-1a over the raw weight bytes; convenient for checkpoint identity.
  std::uint64_t weight_checksum() const;

 private:
  ModelConfig config_;
  std::vector<float> embedding_;  // vocab x hidden
  std::vector<LayerWeights> layers_;
  std::vector<float> final_norm_;
  std::vector<float> lm_head_;    // vocab x hidden
  kernels::RotaryTable rotary_;

  Model(const ModelConfig& config, bool initialize);
  void run(std::span<const int> tokens, std::span<const int> positions,
           const std::vector<std::uint8_t>& mask_bits, std::size_t key_len,
           KvCache* cache, std::vector<float>& logits_out) const;
  template <typename Fn>
  void for_each_tensor(Fn&& fn);
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const;
};

}  // namespace aspd
