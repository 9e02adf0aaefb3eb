#include "aspd/layout.hpp"

#include <algorithm>
#include <string>

#include "aspd/errors.hpp"

namespace aspd {

namespace {

std::string block_label(std::size_t index) {
  return "block " + std::to_string(index + 1);
}

}  // namespace

std::vector<int> recompute_positions(const std::vector<Block>& blocks) {
  std::vector<int> positions;
  int flattened_count = 0;   // tokens in all blocks processed so far
  int last_position = 0;     // position of the most recent token
  int active_stage = 0;      // currently running parallel stage, 0 if none
  int highest_stage = 0;     // stages may never reappear once left
  int stage_start = 0;
  std::map<int, int> branch_offsets;  // branch -> tokens seen, current stage

  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    const Block& block = blocks[bi];
    if (block.members.empty()) {
      throw ValidationError(block_label(bi) + " has no members");
    }
    if (block.kind == BlockKind::Serial) {
      if (block.stage != 0) {
        throw ValidationError(block_label(bi) + " is serial but carries stage " +
                              std::to_string(block.stage));
      }
      if (block.members.size() != 1) {
        throw ValidationError(block_label(bi) + " is serial but has " +
                              std::to_string(block.members.size()) + " members");
      }
      if (block.members[0].branch != 0) {
        throw ValidationError(block_label(bi) +
                              " is serial but its member is on branch " +
                              std::to_string(block.members[0].branch));
      }
      active_stage = 0;
      last_position = 1 + flattened_count;
      positions.push_back(last_position);
      flattened_count += 1;
      continue;
    }

    // Parallel block.
    if (block.stage <= 0) {
      throw ValidationError(block_label(bi) + " is parallel but carries stage " +
                            std::to_string(block.stage));
    }
    if (block.stage != active_stage) {
      if (block.stage <= highest_stage) {
        throw ValidationError(block_label(bi) + " reopens stage " +
                              std::to_string(block.stage) +
                              "; stages may not interleave");
      }
      active_stage = block.stage;
      highest_stage = block.stage;
      stage_start = last_position + 1;
      branch_offsets.clear();
    }
    int prev_branch = 0;
    for (const TokenMeta& meta : block.members) {
      if (meta.branch <= prev_branch) {
        throw ValidationError(block_label(bi) +
                              " members are not in strictly ascending branch "
                              "order or repeat a branch");
      }
      prev_branch = meta.branch;
      if (meta.stage != block.stage) {
        throw ValidationError(block_label(bi) + " member on branch " +
                              std::to_string(meta.branch) + " carries stage " +
                              std::to_string(meta.stage) +
                              " inside a stage-" + std::to_string(block.stage) +
                              " block");
      }
      int offset = branch_offsets[meta.branch]++;
      int pos = stage_start + offset;
      positions.push_back(pos);
      last_position = pos;  // flattened-order predecessor for the next stage
      flattened_count += 1;
    }
  }
  return positions;
}

TokenMeta SequenceLayout::append_serial(int token_id) {
  if (mode() != Mode::Serial) {
    throw ModeError("append_serial called while stage " +
                    std::to_string(current_stage_) + " is open");
  }
  TokenMeta meta;
  meta.token_id = token_id;
  meta.branch = 0;
  meta.stage = 0;
  meta.block_index = static_cast<int>(blocks_.size()) + 1;
  meta.position_id = 1 + static_cast<int>(flattened_.size());
  meta.branch_offset = 0;

  Block block;
  block.kind = BlockKind::Serial;
  block.stage = 0;
  block.members.push_back(meta);
  blocks_.push_back(std::move(block));
  flattened_.push_back(meta);
  return meta;
}

const StageInfo& SequenceLayout::open_stage(int branch_count) {
  if (mode() != Mode::Serial) {
    throw ModeError("open_stage called while stage " +
                    std::to_string(current_stage_) + " is open");
  }
  if (branch_count < 1) {
    throw ConfigError("a stage needs at least one branch, got " +
                      std::to_string(branch_count));
  }
  StageInfo info;
  info.stage = static_cast<int>(stages_.size()) + 1;
  info.start_position = last_token() ? last_token()->position_id + 1 : 1;
  info.branch_count = branch_count;
  info.branch_lengths.assign(static_cast<std::size_t>(branch_count), 0);
  info.branch_closed.assign(static_cast<std::size_t>(branch_count), false);
  info.open = true;
  stages_.push_back(std::move(info));
  current_stage_ = stages_.back().stage;
  return stages_.back();
}

StageInfo& SequenceLayout::mutable_stage(int stage) {
  if (stage < 1 || stage > static_cast<int>(stages_.size())) {
    throw BranchStateError("no such stage: " + std::to_string(stage));
  }
  return stages_[static_cast<std::size_t>(stage - 1)];
}

const StageInfo& SequenceLayout::stage_info(int stage) const {
  if (stage < 1 || stage > static_cast<int>(stages_.size())) {
    throw BranchStateError("no such stage: " + std::to_string(stage));
  }
  return stages_[static_cast<std::size_t>(stage - 1)];
}

std::vector<TokenMeta> SequenceLayout::append_parallel_step(
    const std::map<int, int>& tokens) {
  if (mode() != Mode::Parallel) {
    throw ModeError("append_parallel_step called with no open stage");
  }
  if (tokens.empty()) {
    throw BranchStateError("a parallel step must advance at least one branch");
  }
  StageInfo& info = mutable_stage(current_stage_);
  for (const auto& [branch, token_id] : tokens) {
    (void)token_id;
    if (branch < 1 || branch > info.branch_count) {
      throw BranchStateError("stage " + std::to_string(info.stage) +
                             " has no branch " + std::to_string(branch));
    }
    if (info.branch_closed[static_cast<std::size_t>(branch - 1)]) {
      throw BranchStateError("branch " + std::to_string(branch) +
                             " of stage " + std::to_string(info.stage) +
                             " is closed");
    }
  }

  Block block;
  block.kind = BlockKind::Parallel;
  block.stage = info.stage;
  std::vector<TokenMeta> out;
  for (const auto& [branch, token_id] : tokens) {  // std::map: ascending branch
    int& length = info.branch_lengths[static_cast<std::size_t>(branch - 1)];
    TokenMeta meta;
    meta.token_id = token_id;
    meta.branch = branch;
    meta.stage = info.stage;
    meta.block_index = static_cast<int>(blocks_.size()) + 1;
    meta.position_id = info.start_position + length;
    meta.branch_offset = length;
    length += 1;
    block.members.push_back(meta);
    flattened_.push_back(meta);
    out.push_back(meta);
  }
  blocks_.push_back(std::move(block));
  return out;
}

bool SequenceLayout::close_branch(int branch) {
  if (mode() != Mode::Parallel) {
    throw ModeError("close_branch called with no open stage");
  }
  StageInfo& info = mutable_stage(current_stage_);
  if (branch < 1 || branch > info.branch_count) {
    throw BranchStateError("stage " + std::to_string(info.stage) +
                           " has no branch " + std::to_string(branch));
  }
  auto idx = static_cast<std::size_t>(branch - 1);
  if (info.branch_closed[idx]) {
    throw BranchStateError("branch " + std::to_string(branch) + " of stage " +
                           std::to_string(info.stage) + " is already closed");
  }
  info.branch_closed[idx] = true;
  if (info.open_branches() == 0) {
    info.open = false;
    current_stage_ = 0;
    return false;
  }
  return true;
}

nlohmann::json SequenceLayout::to_json() const {
  nlohmann::json out;
  out["blocks"] = nlohmann::json::array();
  for (const Block& block : blocks_) {
    nlohmann::json jb;
    jb["kind"] = block.kind == BlockKind::Serial ? "serial" : "parallel";
    jb["stage"] = block.stage;
    jb["tokens"] = nlohmann::json::array();
    for (const TokenMeta& meta : block.members) {
      jb["tokens"].push_back({{"id", meta.token_id},
                              {"branch", meta.branch},
                              {"pos", meta.position_id}});
    }
    out["blocks"].push_back(std::move(jb));
  }
  return out;
}

SequenceLayout SequenceLayout::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("blocks") || !j["blocks"].is_array()) {
    throw ValidationError("layout snapshot must be {\"blocks\": [...]}");
  }
  // First rebuild the plain block list, then let recompute_positions validate
  // the structure and supply the expected positions.
  std::vector<Block> blocks;
  for (const auto& jb : j["blocks"]) {
    Block block;
    std::string kind = jb.at("kind").get<std::string>();
    if (kind == "serial") {
      block.kind = BlockKind::Serial;
    } else if (kind == "parallel") {
      block.kind = BlockKind::Parallel;
    } else {
      throw ValidationError("unknown block kind \"" + kind + "\"");
    }
    block.stage = jb.at("stage").get<int>();
    for (const auto& jt : jb.at("tokens")) {
      TokenMeta meta;
      meta.token_id = jt.at("id").get<int>();
      meta.branch = jt.at("branch").get<int>();
      meta.stage = block.stage;
      block.members.push_back(meta);
    }
    blocks.push_back(std::move(block));
  }
  std::vector<int> expected = recompute_positions(blocks);

  // Replay through the incremental API so all invariants hold on the result.
  SequenceLayout layout;
  auto close_open_stage = [&layout] {
    if (layout.mode() != Mode::Parallel) {
      return;
    }
    const StageInfo& open = layout.stage_info(layout.current_stage());
    for (int b = 1; b <= open.branch_count; ++b) {
      if (!open.branch_closed[static_cast<std::size_t>(b - 1)]) {
        layout.close_branch(b);
      }
    }
  };
  std::size_t flat = 0;
  for (const Block& block : blocks) {
    if (block.kind == BlockKind::Serial) {
      close_open_stage();
      TokenMeta meta = layout.append_serial(block.members[0].token_id);
      if (meta.position_id != expected[flat]) {
        throw ConsistencyError("layout rebuild produced position " +
                               std::to_string(meta.position_id) +
                               " where the snapshot implies " +
                               std::to_string(expected[flat]));
      }
      ++flat;
      continue;
    }
    if (layout.current_stage() != block.stage) {
      // Close out whatever stage the replay is in, then open the next one
      // with the branch count implied by the snapshot.
      close_open_stage();
      int max_branch = 0;
      for (const Block& later : blocks) {
        if (later.stage == block.stage) {
          for (const TokenMeta& meta : later.members) {
            max_branch = std::max(max_branch, meta.branch);
          }
        }
      }
      layout.open_stage(max_branch);
    }
    std::map<int, int> step;
    for (const TokenMeta& meta : block.members) {
      step[meta.branch] = meta.token_id;
    }
    std::vector<TokenMeta> metas = layout.append_parallel_step(step);
    for (const TokenMeta& meta : metas) {
      if (meta.position_id != expected[flat]) {
        throw ConsistencyError("layout rebuild produced position " +
                               std::to_string(meta.position_id) +
                               " where the snapshot implies " +
                               std::to_string(expected[flat]));
      }
      ++flat;
    }
  }
  close_open_stage();

  // Cross-check stored positions, if present, against the recomputed ones.
  std::size_t idx = 0;
  for (const auto& jb : j["blocks"]) {
    for (const auto& jt : jb.at("tokens")) {
      if (jt.contains("pos") && jt.at("pos").get<int>() != expected[idx]) {
        throw ConsistencyError(
            "snapshot position " + std::to_string(jt.at("pos").get<int>()) +
            " disagrees with the recomputed position " +
            std::to_string(expected[idx]));
      }
      ++idx;
    }
  }
  return layout;
}

}  // namespace aspd
