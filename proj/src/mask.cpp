#include "aspd/mask.hpp"

#include <algorithm>

#include "aspd/errors.hpp"

namespace aspd {

bool visible(const TokenMeta& query, const TokenMeta& key, VisibilityMode mode) {
  // Causality by simultaneity block; ties inside one block resolve by branch
  // index, which is the flattened order, and a token always sees itself.
  bool causally_ordered =
      key.block_index < query.block_index ||
      (key.block_index == query.block_index && key.branch <= query.branch);
  if (!causally_ordered) {
    return false;
  }
  if (mode == VisibilityMode::Shared) {
    return true;
  }
  bool same_parallel_stage =
      query.stage > 0 && query.stage == key.stage && query.branch != key.branch;
  return !same_parallel_stage;
}

AttentionMask::AttentionMask(std::vector<MaskRow> rows) : rows_(std::move(rows)) {
  for (const MaskRow& row : rows_) {
    if (row.width != rows_[0].width) {
      throw ShapeError("attention mask rows have mixed widths");
    }
  }
  if (!rows_.empty() && key_len() < kDenseLimit) {
    dense_.assign(rows_.size() * key_len(), 0);
    for (std::size_t q = 0; q < rows_.size(); ++q) {
      for (const auto& [b, e] : rows_[q].ranges) {
        std::fill(dense_.begin() + static_cast<std::ptrdiff_t>(q * key_len() + b),
                  dense_.begin() + static_cast<std::ptrdiff_t>(q * key_len() + e),
                  std::uint8_t{1});
      }
    }
  }
}

bool AttentionMask::at(std::size_t query, std::size_t key) const {
  if (query >= query_len() || key >= key_len()) {
    throw ShapeError("mask lookup out of range");
  }
  if (!dense_.empty()) {
    return dense_[query * key_len() + key] != 0;
  }
  return rows_[query].at(key);
}

std::vector<std::uint8_t> AttentionMask::dense_bits() const {
  if (!dense_.empty()) {
    return dense_;
  }
  std::vector<std::uint8_t> bits(query_len() * key_len(), 0);
  for (std::size_t q = 0; q < query_len(); ++q) {
    for (const auto& [b, e] : rows_[q].ranges) {
      std::fill(bits.begin() + static_cast<std::ptrdiff_t>(q * key_len() + b),
                bits.begin() + static_cast<std::ptrdiff_t>(q * key_len() + e),
                std::uint8_t{1});
    }
  }
  return bits;
}

std::string AttentionMask::to_bit_lines() const {
  std::string out;
  out.reserve(query_len() * (key_len() + 1));
  for (std::size_t q = 0; q < query_len(); ++q) {
    const MaskRow& row = rows_[q];
    std::string line(key_len(), '0');
    for (const auto& [b, e] : row.ranges) {
      for (std::size_t k = b; k < e; ++k) line[k] = '1';
    }
    out += line;
    out += '\n';
  }
  return out;
}

namespace {

// Flat index of each block's first member, plus each stage's first flat index.
struct FlatIndex {
  std::vector<std::size_t> block_start;
  std::map<int, std::size_t> stage_start;
  std::map<int, std::size_t> stage_first_block;
};

FlatIndex index_blocks(const std::vector<Block>& blocks) {
  FlatIndex idx;
  idx.block_start.reserve(blocks.size());
  std::size_t flat = 0;
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    idx.block_start.push_back(flat);
    const Block& block = blocks[bi];
    if (block.kind == BlockKind::Parallel &&
        !idx.stage_start.contains(block.stage)) {
      idx.stage_start[block.stage] = flat;
      idx.stage_first_block[block.stage] = bi;
    }
    flat += block.members.size();
  }
  return idx;
}

// Structural row construction.  A serial token (and every token under Shared
// visibility) sees the contiguous flattened prefix up to and including
// itself.  Under Independent visibility a parallel token sees the contiguous
// prefix that precedes its stage, then only its own branch's tokens within
// the stage.
MaskRow row_for(const std::vector<Block>& blocks, const FlatIndex& idx,
                const TokenMeta& meta, std::size_t self_flat, std::size_t width,
                VisibilityMode mode) {
  MaskRow row;
  row.width = width;
  if (meta.stage == 0 || mode == VisibilityMode::Shared) {
    row.ranges.push_back({0, self_flat + 1});
    return row;
  }
  std::size_t stage_flat = idx.stage_start.at(meta.stage);
  if (stage_flat > 0) {
    row.ranges.push_back({0, stage_flat});
  }
  std::size_t first_block = idx.stage_first_block.at(meta.stage);
  std::size_t own_block = static_cast<std::size_t>(meta.block_index - 1);
  for (std::size_t bi = first_block; bi <= own_block; ++bi) {
    const Block& block = blocks[bi];
    for (std::size_t mi = 0; mi < block.members.size(); ++mi) {
      if (block.members[mi].branch == meta.branch) {
        row.append(idx.block_start[bi] + mi);
        break;
      }
    }
  }
  return row;
}

}  // namespace

AttentionMask build_full_mask(const SequenceLayout& layout, VisibilityMode mode) {
  const std::vector<Block>& blocks = layout.blocks();
  FlatIndex idx = index_blocks(blocks);
  std::size_t n = layout.flattened_len();
  std::vector<MaskRow> rows;
  rows.reserve(n);
  std::size_t flat = 0;
  for (const Block& block : blocks) {
    for (const TokenMeta& meta : block.members) {
      rows.push_back(row_for(blocks, idx, meta, flat, n, mode));
      ++flat;
    }
  }
  return AttentionMask(std::move(rows));
}

std::vector<MaskRow> mask_rows_for_new_tokens(const SequenceLayout& layout,
                                              std::span<const TokenMeta> new_tokens,
                                              VisibilityMode mode) {
  const std::vector<TokenMeta>& flattened = layout.flattened();
  if (new_tokens.size() > flattened.size()) {
    throw ConsistencyError("more new tokens than the layout holds");
  }
  std::size_t tail_start = flattened.size() - new_tokens.size();
  for (std::size_t i = 0; i < new_tokens.size(); ++i) {
    if (!(flattened[tail_start + i] == new_tokens[i])) {
      throw ConsistencyError(
          "new tokens do not match the tail of the flattened layout");
    }
  }
  const std::vector<Block>& blocks = layout.blocks();
  FlatIndex idx = index_blocks(blocks);
  std::vector<MaskRow> rows;
  rows.reserve(new_tokens.size());
  for (std::size_t i = 0; i < new_tokens.size(); ++i) {
    rows.push_back(row_for(blocks, idx, new_tokens[i], tail_start + i,
                           flattened.size(), mode));
  }
  return rows;
}

}  // namespace aspd
