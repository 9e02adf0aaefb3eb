#pragma once

#include <cstddef>
#include <map>
#include <vector>

#include <json.hpp>

namespace aspd {

/// Block kind: a Serial block holds exactly one main-branch token, a Parallel
/// block holds the tokens emitted by the open branches of one stage during a
/// single simultaneous step.
enum class BlockKind { Serial, Parallel };

/// Per-token bookkeeping.  `branch` is 0 for the main branch and 1-based
/// inside a parallel stage; `stage` is 0 for serial tokens and 1-based for
/// parallel stages; `block_index` is the 1-based index of the enclosing block
/// (the causal timestamp: tokens in later blocks may attend to tokens in
/// earlier blocks, never the reverse); `position_id` is the shared position
/// fed to the model; `branch_offset` counts earlier tokens of the same branch
/// within the same stage.
struct TokenMeta {
  int token_id = -1;
  int branch = 0;
  int stage = 0;
  int block_index = 0;
  int position_id = 0;
  int branch_offset = 0;

  friend bool operator==(const TokenMeta&, const TokenMeta&) = default;
};

/// One simultaneity block.  Members are ordered by ascending branch index,
/// which is also their order in the flattened sequence.
struct Block {
  BlockKind kind = BlockKind::Serial;
  int stage = 0;
  std::vector<TokenMeta> members;
};

/// Aggregate bookkeeping for one parallel stage.
struct StageInfo {
  int stage = 0;
  int start_position = 0;            ///< shared start of every branch
  int branch_count = 0;
  std::vector<int> branch_lengths;   ///< tokens emitted so far, per branch
  std::vector<bool> branch_closed;
  bool open = false;

  int open_branches() const {
    int n = 0;
    for (bool c : branch_closed) n += c ? 0 : 1;
    return n;
  }
};

/// Recompute every token position from block structure alone.
///
/// Serial tokens sit at 1 + (number of tokens in all earlier blocks); tokens
/// of a parallel stage sit at stage_start + branch_offset, where stage_start
/// is one past the position of the last token before the stage and every
/// branch restarts from the same stage_start.  Returns positions in flattened
/// order (blocks in order, members in branch order).  Throws ValidationError
/// on malformed block lists (wrong member counts, duplicate branches in one
/// block, interleaved stages, non-contiguous offsets).
std::vector<int> recompute_positions(const std::vector<Block>& blocks);

/// Incrementally built hybrid sequence: serial main-branch tokens
/// interleaved with parallel stages whose branches advance in lockstep
/// blocks.  All positions follow the shared-position scheme implemented by
/// recompute_positions(); the two paths are kept equivalent by construction
/// and checked against each other in the tests.
class SequenceLayout {
 public:
  enum class Mode { Serial, Parallel };

  SequenceLayout() = default;

  Mode mode() const { return current_stage_ == 0 ? Mode::Serial : Mode::Parallel; }
  int current_stage() const { return current_stage_; }

  /// Append one main-branch token.  Only valid in serial mode.
  TokenMeta append_serial(int token_id);

  /// Open a parallel stage with the given branch count (>= 1).  Only valid in
  /// serial mode.  Branches are numbered 1..branch_count.
  const StageInfo& open_stage(int branch_count);

  /// Append one simultaneous step: `tokens` maps branch index -> token id for
  /// every branch that advances this step.  Every key must be an open branch
  /// of the current stage; branches absent from the map are unaffected, so
  /// ragged branch lengths are supported.  Returns the new metas in branch
  /// order.
  std::vector<TokenMeta> append_parallel_step(const std::map<int, int>& tokens);

  /// Mark a branch of the current stage closed.  Returns true while the stage
  /// still has open branches; when the last branch closes the layout returns
  /// to serial mode and returns false.
  bool close_branch(int branch);

  const std::vector<Block>& blocks() const { return blocks_; }
  const std::vector<StageInfo>& stages() const { return stages_; }

  /// Stage bookkeeping for a 1-based stage id.
  const StageInfo& stage_info(int stage) const;

  std::size_t flattened_len() const { return flattened_.size(); }

  /// Token metas in flattened order: blocks in order, members by branch.
  const std::vector<TokenMeta>& flattened() const { return flattened_; }

  const TokenMeta* last_token() const {
    return flattened_.empty() ? nullptr : &flattened_.back();
  }

  /// Snapshot serialization.  The snapshot records blocks only; stage
  /// bookkeeping is reconstructed on load and every stage in a loaded layout
  /// is considered closed (a snapshot is a record of emitted tokens, not of
  /// in-flight decode state).
  nlohmann::json to_json() const;
  static SequenceLayout from_json(const nlohmann::json& j);

 private:
  std::vector<Block> blocks_;
  std::vector<StageInfo> stages_;
  std::vector<TokenMeta> flattened_;
  int current_stage_ = 0;  // 0 = serial mode, else 1-based open stage id

  StageInfo& mutable_stage(int stage);
};

}  // namespace aspd
