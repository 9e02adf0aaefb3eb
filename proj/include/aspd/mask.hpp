#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "aspd/layout.hpp"

namespace aspd {

/// Cross-branch visibility policy for tokens inside the same parallel stage.
/// Independent: branches of one stage cannot see each other (the default).
/// Shared: branches of one stage see each other's earlier blocks.
enum class VisibilityMode { Independent, Shared };

/// May token `query` attend to token `key`?
///
/// Causal order is block order: a token sees only tokens from earlier blocks
/// (plus, inside its own block, members with a lower branch index, and
/// itself).  On top of causality, Independent mode hides tokens that belong
/// to a different branch of the same parallel stage.  Main-branch tokens see
/// everything causally earlier; tokens of distinct stages see each other
/// whenever causally ordered.
bool visible(const TokenMeta& query, const TokenMeta& key, VisibilityMode mode);

/// One mask row: visibility of a single query token over `width` key slots,
/// stored as sorted, non-overlapping, half-open [begin, end) ranges.
struct MaskRow {
  std::size_t width = 0;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;

  bool at(std::size_t key) const {
    for (const auto& [b, e] : ranges) {
      if (key < b) return false;
      if (key < e) return true;
    }
    return false;
  }
  void append(std::size_t key) {  // keys must arrive in ascending order
    if (!ranges.empty() && ranges.back().second == key) {
      ranges.back().second = key + 1;
    } else {
      ranges.push_back({key, key + 1});
    }
  }
  std::vector<std::uint8_t> dense() const {
    std::vector<std::uint8_t> bits(width, 0);
    for (const auto& [b, e] : ranges) {
      for (std::size_t k = b; k < e; ++k) bits[k] = 1;
    }
    return bits;
  }
};

/// Square attention mask over a flattened sequence.  Small masks are
/// materialized densely; past kDenseLimit rows only the per-row ranges are
/// kept.  Both representations answer at() identically.
class AttentionMask {
 public:
  static constexpr std::size_t kDenseLimit = 4096;

  AttentionMask() = default;
  explicit AttentionMask(std::vector<MaskRow> rows);

  std::size_t query_len() const { return rows_.size(); }
  std::size_t key_len() const { return rows_.empty() ? 0 : rows_[0].width; }

  bool at(std::size_t query, std::size_t key) const;
  const MaskRow& row(std::size_t query) const { return rows_.at(query); }
  const std::vector<MaskRow>& rows() const { return rows_; }
  bool is_dense() const { return !dense_.empty(); }

  /// Flat row-major 0/1 bytes (query_len x key_len), built on demand for
  /// range-backed masks.
  std::vector<std::uint8_t> dense_bits() const;

  /// Human-readable serialization: one line of '0'/'1' per query row.
  std::string to_bit_lines() const;

 private:
  std::vector<MaskRow> rows_;
  std::vector<std::uint8_t> dense_;  // query_len * key_len when small enough
};

/// Build the full mask for every token of the layout against every token.
/// Rows are constructed structurally (contiguous prefix plus stage-local
/// ranges), not by enumerating pairs; the pairwise predicate visible() serves
/// as the independent test oracle for this construction.
AttentionMask build_full_mask(const SequenceLayout& layout, VisibilityMode mode);

/// Mask rows for the `new_tokens` found at the tail of the layout, each of
/// width layout.flattened_len(): exactly the rows a cache-backed forward pass
/// needs for the newly appended block(s).  The metas must be the final
/// `new_tokens.size()` entries of layout.flattened().
std::vector<MaskRow> mask_rows_for_new_tokens(const SequenceLayout& layout,
                                              std::span<const TokenMeta> new_tokens,
                                              VisibilityMode mode);

}  // namespace aspd
