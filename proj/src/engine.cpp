#include "aspd/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <map>
#include <string>

#include "aspd/errors.hpp"

namespace aspd {

void SamplerConfig::validate() const {
  if (mode == Mode::Stochastic) {
    if (!(temperature > 0.0f)) {
      throw ConfigError("temperature must be positive");
    }
    if (top_k < 1) {
      throw ConfigError("top_k must be at least 1");
    }
    if (!(top_p > 0.0f) || top_p > 1.0f) {
      throw ConfigError("top_p must lie in (0, 1]");
    }
  }
}

void EngineConfig::validate() const {
  if (max_total_tokens < 1 || max_branch_tokens < 1 || max_titles < 1) {
    throw ConfigError("engine limits must be at least 1");
  }
  positions.validate();
}

int sample(std::span<const float> logits, const SamplerConfig& config,
           const std::unordered_set<int>& forbidden, std::mt19937_64& rng) {
  config.validate();
  struct Candidate {
    int id;
    float logit;
  };
  std::vector<Candidate> allowed;
  allowed.reserve(logits.size());
  for (int id = 0; id < static_cast<int>(logits.size()); ++id) {
    if (!forbidden.contains(id) && std::isfinite(logits[static_cast<std::size_t>(id)])) {
      allowed.push_back({id, logits[static_cast<std::size_t>(id)]});
    }
  }
  if (allowed.empty()) {
    throw SamplingError("every token is forbidden or non-finite");
  }

  if (config.mode == SamplerConfig::Mode::Greedy) {
    const Candidate* best = &allowed[0];
    for (const Candidate& c : allowed) {
      if (c.logit > best->logit) best = &c;  // ties keep the lowest id
    }
    return best->id;
  }

  float max_logit = allowed[0].logit;
  for (const Candidate& c : allowed) {
    max_logit = std::max(max_logit, c.logit);
  }
  std::sort(allowed.begin(), allowed.end(), [](const Candidate& a, const Candidate& b) {
    if (a.logit != b.logit) return a.logit > b.logit;
    return a.id < b.id;
  });
  std::size_t keep = std::min<std::size_t>(allowed.size(),
                                           static_cast<std::size_t>(config.top_k));
  allowed.resize(keep);

  std::vector<double> weights(keep);
  double total = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    weights[i] = std::exp(
        static_cast<double>((allowed[i].logit - max_logit) / config.temperature));
    total += weights[i];
  }
  // Nucleus cut inside the top-k pool: smallest prefix reaching top_p of the
  // pool's mass (at least one candidate always survives).
  double threshold = static_cast<double>(config.top_p) * total;
  double cum = 0.0;
  std::size_t cut = keep;
  for (std::size_t i = 0; i < keep; ++i) {
    cum += weights[i];
    if (cum >= threshold) {
      cut = i + 1;
      break;
    }
  }
  double kept_mass = 0.0;
  for (std::size_t i = 0; i < cut; ++i) {
    kept_mass += weights[i];
  }
  double u = static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
  double target = u * kept_mass;
  double walk = 0.0;
  for (std::size_t i = 0; i < cut; ++i) {
    walk += weights[i];
    if (target < walk) {
      return allowed[i].id;
    }
  }
  return allowed[cut - 1].id;
}

// ---------------------------------------------------------------------------
// ModelPolicy

ModelPolicy::ModelPolicy(const Model& model, bool record_rows)
    : model_(&model), cache_(model.make_cache()), record_(record_rows) {}

std::vector<std::vector<float>> ModelPolicy::extend(
    std::span<const PolicyToken> tokens, std::span<const MaskRow> mask_rows) {
  std::size_t base = cache_.len();
  std::vector<int> ids(tokens.size());
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    ids[i] = tokens[i].meta.token_id;
    positions[i] = tokens[i].model_position;
  }
  std::vector<float> flat =
      model_->forward_incremental(cache_, ids, positions, mask_rows);
  std::size_t vocab = static_cast<std::size_t>(model_->config().vocab_size);
  std::vector<std::vector<float>> rows(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    rows[i].assign(flat.begin() + static_cast<std::ptrdiff_t>(i * vocab),
                   flat.begin() + static_cast<std::ptrdiff_t>((i + 1) * vocab));
    if (record_) {
      if (recorded_.size() <= base + i) {
        recorded_.resize(base + i + 1);
      }
      recorded_[base + i] = rows[i];
    }
  }
  return rows;
}

void ModelPolicy::reassign_positions(std::size_t keep,
                                     std::span<const PolicyToken> tokens,
                                     std::span<const MaskRow> mask_rows) {
  cache_.truncate(keep);
  std::vector<int> ids(tokens.size());
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    ids[i] = tokens[i].meta.token_id;
    positions[i] = tokens[i].model_position;
  }
  std::vector<float> flat =
      model_->forward_incremental(cache_, ids, positions, mask_rows);
  if (record_) {
    std::size_t vocab = static_cast<std::size_t>(model_->config().vocab_size);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (recorded_.size() <= keep + i) {
        recorded_.resize(keep + i + 1);
      }
      recorded_[keep + i].assign(
          flat.begin() + static_cast<std::ptrdiff_t>(i * vocab),
          flat.begin() + static_cast<std::ptrdiff_t>((i + 1) * vocab));
    }
  }
}

// ---------------------------------------------------------------------------
// ScriptedPolicy

ScriptedPolicy::ScriptedPolicy(const StructuredResponse& response,
                               const ByteTokenizer& tokenizer,
                               std::size_t prompt_len,
                               std::unique_ptr<GenerativePolicy> inner)
    : tokenizer_(tokenizer), prompt_remaining_(prompt_len),
      inner_(std::move(inner)) {
  if (inner_ && inner_->vocab_size() != tokenizer_.vocab_size()) {
    throw ConfigError("inner policy vocabulary does not match the tokenizer");
  }
  const SpecialTokens& sp = tokenizer_.specials();
  for (const ResponseSegment& seg : response.segments) {
    if (seg.kind == ResponseSegment::Kind::Serial) {
      std::vector<int> ids = tokenizer_.encode(seg.text);
      main_.insert(main_.end(), ids.begin(), ids.end());
      continue;
    }
    const ParallelGroup& group = seg.group;
    if (group.titles.size() != group.branches.size()) {
      throw ValidationError("scripted group has " +
                            std::to_string(group.titles.size()) + " titles but " +
                            std::to_string(group.branches.size()) + " branches");
    }
    for (const std::string& title : group.titles) {
      main_.push_back(sp.title_open);
      std::vector<int> ids = tokenizer_.encode(title);
      main_.insert(main_.end(), ids.begin(), ids.end());
      main_.push_back(sp.title_close);
    }
    if (group.titles.empty()) {
      // Deliberately malformed script: a group marker with no titles.  The
      // engine is expected to reject it at decode time.
      main_.push_back(sp.para_open);
      continue;
    }
    main_.push_back(sp.para_open);
    std::vector<BranchScript> stage;
    for (std::size_t b = 0; b < group.branches.size(); ++b) {
      BranchScript bs;
      std::string prefix = group.titles[b] + ": ";
      bs.prefix_len = 1 + tokenizer_.encode(prefix).size();  // marker + text
      const std::string& text = group.branches[b];
      std::string body = text;
      if (body.rfind(prefix, 0) == 0) {
        body = body.substr(prefix.size());
      }
      bs.body = tokenizer_.encode(body);
      bs.body.push_back(sp.branch_close);
      stage.push_back(std::move(bs));
    }
    stages_.push_back(std::move(stage));
  }
  main_.push_back(tokenizer_.eos());
}

int ScriptedPolicy::vocab_size() const {
  return inner_ ? inner_->vocab_size() : tokenizer_.vocab_size();
}

void ScriptedPolicy::observe(const TokenMeta& meta) {
  const SpecialTokens& sp = tokenizer_.specials();
  if (meta.stage == 0) {
    if (prompt_remaining_ > 0) {
      --prompt_remaining_;
      return;
    }
    if (meta.token_id == sp.para_close) {
      return;  // forced by the engine, never part of the script
    }
    if (main_cursor_ < main_.size() && main_[main_cursor_] == meta.token_id) {
      ++main_cursor_;
    }
    // A mismatch means the engine rejected or replaced our suggestion; stay
    // put so the remaining script keeps its alignment.
    return;
  }
  std::size_t stage = static_cast<std::size_t>(meta.stage - 1);
  std::size_t branch = static_cast<std::size_t>(meta.branch - 1);
  if (stage < stages_.size() && branch < stages_[stage].size()) {
    stages_[stage][branch].observed += 1;
  }
}

int ScriptedPolicy::peek_target(const TokenMeta& meta) const {
  if (meta.stage == 0) {
    if (main_cursor_ < main_.size()) {
      return main_[main_cursor_];
    }
    return tokenizer_.eos();
  }
  std::size_t stage = static_cast<std::size_t>(meta.stage - 1);
  std::size_t branch = static_cast<std::size_t>(meta.branch - 1);
  if (stage >= stages_.size() || branch >= stages_[stage].size()) {
    return tokenizer_.specials().branch_close;
  }
  const BranchScript& bs = stages_[stage][branch];
  if (bs.observed < bs.prefix_len) {
    // Still inside the forced prefix; the engine will not sample this row.
    return bs.body.empty() ? tokenizer_.specials().branch_close : bs.body[0];
  }
  std::size_t idx = bs.observed - bs.prefix_len;
  if (idx < bs.body.size()) {
    return bs.body[idx];
  }
  return tokenizer_.specials().branch_close;
}

std::vector<std::vector<float>> ScriptedPolicy::extend(
    std::span<const PolicyToken> tokens, std::span<const MaskRow> mask_rows) {
  if (inner_) {
    (void)inner_->extend(tokens, mask_rows);  // advance state, discard rows
  }
  for (const PolicyToken& pt : tokens) {
    observe(pt.meta);
  }
  std::vector<std::vector<float>> rows;
  rows.reserve(tokens.size());
  std::size_t vocab = static_cast<std::size_t>(vocab_size());
  for (const PolicyToken& pt : tokens) {
    std::vector<float> row(vocab, -100.0f);
    row[static_cast<std::size_t>(peek_target(pt.meta))] = 100.0f;
    rows.push_back(std::move(row));
  }
  return rows;
}

void ScriptedPolicy::reassign_positions(std::size_t keep,
                                        std::span<const PolicyToken> tokens,
                                        std::span<const MaskRow> mask_rows) {
  if (inner_) {
    inner_->reassign_positions(keep, tokens, mask_rows);
  }
}

// ---------------------------------------------------------------------------
// Decode loop

namespace {

using Clock = std::chrono::steady_clock;

enum class Phase { Prefill, Serial, Parallel };

struct BranchRun {
  int index = 0;                 // 1-based branch id within the stage
  std::deque<int> forced;        // unspent forced prefix (markers included)
  int emitted = 0;               // tokens appended so far, markers included
  bool closed = false;
  std::vector<int> content;      // tokens between the markers
  std::vector<float> row;        // logits of the branch's latest token
  bool row_valid = false;
};

struct Decoder {
  GenerativePolicy& policy;
  EngineConfig ecfg;
  SamplerConfig scfg;
  ByteTokenizer tok;
  SpecialTokens sp;
  int eos_id;

  SequenceLayout layout;
  DecodeResult result;
  std::mt19937_64 rng;

  std::vector<PolicyToken> pending;

  // Model-facing position bookkeeping (the layout keeps canonical ids).
  int vnext = 1;        // next serial model position
  int vstart = 0;       // model position shared by the open stage's branches

  // Main-branch sampling state.
  std::vector<float> main_row;
  bool main_row_valid = false;

  // Title collection state.
  bool inside_title = false;
  std::string title_text;
  std::vector<std::string> titles;

  std::string serial_text;  // clean main-branch text since the last segment

  Decoder(GenerativePolicy& p, const EngineConfig& e, const SamplerConfig& s)
      : policy(p), ecfg(e), scfg(s), tok(p.vocab_size()), sp(tok.specials()),
        eos_id(tok.eos()), rng(s.seed) {
    ecfg.validate();
    scfg.validate();
  }

  // -- pending/flush ---------------------------------------------------------

  void push_pending(const TokenMeta& meta, int model_position, bool forced) {
    pending.push_back({meta, model_position, forced});
    if (meta.stage == 0) {
      main_row_valid = false;
    }
  }

  void flush(Phase phase, std::vector<BranchRun>* branches) {
    if (pending.empty()) {
      return;
    }
    std::vector<TokenMeta> metas;
    metas.reserve(pending.size());
    bool any_sampled = false;
    bool any_parallel_sampled = false;
    for (const PolicyToken& pt : pending) {
      metas.push_back(pt.meta);
      if (!pt.forced) {
        any_sampled = true;
        if (pt.meta.stage > 0) any_parallel_sampled = true;
      }
    }
    std::vector<MaskRow> rows =
        mask_rows_for_new_tokens(layout, metas, ecfg.visibility);

    auto t0 = Clock::now();
    std::vector<std::vector<float>> out = policy.extend(pending, rows);
    double dt = std::chrono::duration<double>(Clock::now() - t0).count();

    if (out.size() != pending.size()) {
      throw ConsistencyError("policy returned " + std::to_string(out.size()) +
                             " rows for " + std::to_string(pending.size()) +
                             " tokens");
    }
    result.step_count += 1;
    if (!any_sampled) {
      result.prefill_step_count += 1;
      result.prefill_seconds += dt;
    } else if (any_parallel_sampled || phase == Phase::Parallel) {
      result.parallel_seconds += dt;
    } else {
      result.serial_seconds += dt;
    }

    for (std::size_t i = 0; i < pending.size(); ++i) {
      if (out[i].size() != static_cast<std::size_t>(policy.vocab_size())) {
        throw ConsistencyError("policy row has the wrong vocabulary size");
      }
      const TokenMeta& meta = pending[i].meta;
      if (meta.stage == 0) {
        main_row = std::move(out[i]);
        main_row_valid = true;
      } else if (branches != nullptr) {
        BranchRun& br = branches->at(static_cast<std::size_t>(meta.branch - 1));
        br.row = std::move(out[i]);
        br.row_valid = true;
      }
    }
    pending.clear();
  }

  // -- token appends ---------------------------------------------------------

  void append_serial_token(int token, bool forced) {
    TokenMeta meta = layout.append_serial(token);
    int mp = ecfg.positions.kind == PositionScheme::Kind::SameSeq
                 ? meta.position_id
                 : vnext;
    vnext = mp + 1;
    push_pending(meta, mp, forced);
    result.response_tokens += 1;
    result.serial_tokens += 1;
    if (forced) {
      result.forced_tokens += 1;
    } else {
      result.sampled_tokens += 1;
      result.sampled_step_count += 1;  // one sampled serial token per block
    }
  }

  void append_prompt(std::span<const int> prompt) {
    for (int token : prompt) {
      if (token < 0 || token >= policy.vocab_size()) {
        throw ConfigError("prompt token " + std::to_string(token) +
                          " outside the vocabulary");
      }
      TokenMeta meta = layout.append_serial(token);
      int mp = ecfg.positions.kind == PositionScheme::Kind::SameSeq
                   ? meta.position_id
                   : vnext;
      vnext = mp + 1;
      push_pending(meta, mp, true);
    }
    result.prompt_tokens = static_cast<int>(prompt.size());
  }

  int branch_model_position(const TokenMeta& meta) const {
    switch (ecfg.positions.kind) {
      case PositionScheme::Kind::SameSeq:
        return meta.position_id;
      case PositionScheme::Kind::SameMax:
      case PositionScheme::Kind::SameRearrange:
        return vstart + meta.branch_offset;
      case PositionScheme::Kind::FixedInterval:
        return vstart + (meta.branch - 1) * ecfg.positions.interval +
               meta.branch_offset;
    }
    return meta.position_id;
  }

  // -- sampling --------------------------------------------------------------

  std::unordered_set<int> forbidden_main() const {
    std::unordered_set<int> f = {sp.branch_open, sp.branch_close, sp.para_close};
    if (!inside_title) {
      f.insert(sp.title_close);
      if (static_cast<int>(titles.size()) >= ecfg.max_titles) {
        f.insert(sp.title_open);
      }
    }
    return f;
  }

  std::unordered_set<int> forbidden_branch() const {
    std::unordered_set<int> f = {sp.branch_open};
    if (ecfg.forbid_nested_para) {
      f.insert(sp.title_open);
      f.insert(sp.title_close);
      f.insert(sp.para_open);
      f.insert(sp.para_close);
    } else {
      f.insert(sp.para_close);  // always engine-forced
    }
    return f;
  }

  int sample_main() {
    if (!main_row_valid) {
      throw ConsistencyError("no logits available for the main branch");
    }
    std::unordered_set<int> forbidden = forbidden_main();
    int token = sample(main_row, scfg, forbidden, rng);
    if (token == sp.para_open && (titles.empty() || inside_title)) {
      // Group marker without a complete title run: reject and resample.
      forbidden.insert(sp.para_open);
      token = sample(main_row, scfg, forbidden, rng);
    }
    return token;
  }

  // -- transcript helpers ----------------------------------------------------

  /// Invalidated titles degrade to plain text: their words join the serial
  /// text, their markers vanish (serial segments never carry markers, so
  /// every transcript reparses cleanly).
  void degrade_titles() {
    for (const std::string& t : titles) {
      serial_text += t;
    }
    titles.clear();
  }

  void degrade_open_title() {
    serial_text += title_text;
    title_text.clear();
    inside_title = false;
  }

  // -- parallel stage --------------------------------------------------------

  void run_stage(StructuredResponse& transcript) {
    layout.open_stage(static_cast<int>(titles.size()));
    vstart = vnext;

    std::vector<BranchRun> branches;
    for (std::size_t i = 0; i < titles.size(); ++i) {
      BranchRun br;
      br.index = static_cast<int>(i) + 1;
      br.forced.push_back(sp.branch_open);
      for (int id : tok.encode(titles[i] + ": ")) {
        br.forced.push_back(id);
      }
      branches.push_back(std::move(br));
    }

    int branch_cap = ecfg.max_branch_tokens;
    if (ecfg.positions.kind == PositionScheme::Kind::FixedInterval) {
      branch_cap = std::min(branch_cap, ecfg.positions.interval);
    }

    auto open_count = [&branches] {
      int n = 0;
      for (const BranchRun& br : branches) n += br.closed ? 0 : 1;
      return n;
    };

    while (open_count() > 0) {
      bool over_budget = result.response_tokens >= ecfg.max_total_tokens;
      bool needs_sampling = false;
      if (!over_budget) {
        for (const BranchRun& br : branches) {
          if (!br.closed && br.forced.empty() && br.emitted < branch_cap - 1) {
            needs_sampling = true;
          }
        }
      }
      if (needs_sampling) {
        flush(Phase::Parallel, &branches);
      }

      std::map<int, int> step;
      std::map<int, bool> forced_flag;
      bool step_sampled = false;
      for (BranchRun& br : branches) {
        if (br.closed) {
          continue;
        }
        int token;
        bool forced;
        if (over_budget) {
          token = sp.branch_close;
          forced = true;
          result.truncated = true;
        } else if (!br.forced.empty()) {
          token = br.forced.front();
          br.forced.pop_front();
          forced = true;
        } else if (br.emitted >= branch_cap - 1) {
          token = sp.branch_close;
          forced = true;
          result.truncated = true;
        } else {
          if (!br.row_valid) {
            throw ConsistencyError("no logits available for branch " +
                                   std::to_string(br.index));
          }
          token = sample(br.row, scfg, forbidden_branch(), rng);
          if (token == eos_id) {
            token = sp.branch_close;  // end-of-sequence closes the branch
          }
          forced = false;
          step_sampled = true;
        }
        step[br.index] = token;
        forced_flag[br.index] = forced;
      }

      std::vector<TokenMeta> metas = layout.append_parallel_step(step);
      for (const TokenMeta& meta : metas) {
        bool forced = forced_flag[meta.branch];
        push_pending(meta, branch_model_position(meta), forced);
        result.response_tokens += 1;
        result.parallel_tokens += 1;
        if (forced) {
          result.forced_tokens += 1;
        } else {
          result.sampled_tokens += 1;
        }
        BranchRun& br = branches[static_cast<std::size_t>(meta.branch - 1)];
        br.emitted += 1;
        if (meta.token_id == sp.branch_close) {
          br.closed = true;
          layout.close_branch(meta.branch);
        } else if (meta.token_id != sp.branch_open) {
          br.content.push_back(meta.token_id);
        }
      }
      if (step_sampled) {
        result.sampled_step_count += 1;
        result.parallel_step_count += 1;
      }
    }

    const StageInfo& info = layout.stages().back();

    // Position bookkeeping for the serial stream that follows the stage.
    int stage_total = 0;
    int stage_max = 0;
    for (int len : info.branch_lengths) {
      stage_total += len;
      stage_max = std::max(stage_max, len);
    }
    switch (ecfg.positions.kind) {
      case PositionScheme::Kind::SameSeq:
      case PositionScheme::Kind::SameRearrange:
        vnext = vstart + stage_total;
        break;
      case PositionScheme::Kind::SameMax:
        vnext = vstart + stage_max;
        break;
      case PositionScheme::Kind::FixedInterval:
        vnext = vstart + info.branch_count * ecfg.positions.interval;
        break;
    }

    if (ecfg.positions.kind == PositionScheme::Kind::SameRearrange) {
      reassign_stage(info);
    }

    // The group is complete: force the closing marker and record the
    // transcript segment.
    append_serial_token(sp.para_close, /*forced=*/true);

    ParallelGroup group;
    group.titles = titles;
    for (const BranchRun& br : branches) {
      group.branches.push_back(tok.decode(br.content));
    }
    transcript.push_group(std::move(group));
    titles.clear();
  }

  /// Rearranging scheme: once a stage closes, renumber its tokens branch-
  /// contiguously and have the policy rebuild the corresponding state.
  void reassign_stage(const StageInfo& info) {
    flush(Phase::Parallel, nullptr);  // policy must be caught up first

    const std::vector<TokenMeta>& flat = layout.flattened();
    int stage_total = 0;
    for (int len : info.branch_lengths) {
      stage_total += len;
    }
    std::size_t stage_begin = flat.size() - static_cast<std::size_t>(stage_total);

    std::vector<int> branch_base(info.branch_lengths.size() + 1, 0);
    for (std::size_t b = 0; b < info.branch_lengths.size(); ++b) {
      branch_base[b + 1] = branch_base[b] + info.branch_lengths[b];
    }

    std::vector<PolicyToken> tail;
    std::vector<TokenMeta> tail_metas;
    for (std::size_t i = stage_begin; i < flat.size(); ++i) {
      const TokenMeta& meta = flat[i];
      int rank = branch_base[static_cast<std::size_t>(meta.branch - 1)] +
                 meta.branch_offset;
      tail.push_back({meta, vstart + rank, true});
      tail_metas.push_back(meta);
    }
    std::vector<MaskRow> rows =
        mask_rows_for_new_tokens(layout, tail_metas, ecfg.visibility);

    auto t0 = Clock::now();
    policy.reassign_positions(stage_begin, tail, rows);
    result.prefill_seconds +=
        std::chrono::duration<double>(Clock::now() - t0).count();
    result.reposition_count += 1;
    result.step_count += 1;
    result.prefill_step_count += 1;
    main_row_valid = false;  // rows predating the rebuild are stale
  }

  // -- main loop -------------------------------------------------------------

  DecodeResult run(std::span<const int> prompt) {
    if (prompt.empty()) {
      throw ConfigError("the prompt must contain at least one token");
    }
    append_prompt(prompt);

    StructuredResponse transcript;
    bool done = false;
    while (!done) {
      if (result.response_tokens >= ecfg.max_total_tokens) {
        result.truncated = true;
        break;
      }
      flush(Phase::Serial, nullptr);
      int token = sample_main();

      if (token == eos_id) {
        degrade_titles();
        if (inside_title) {
          degrade_open_title();
        }
        append_serial_token(eos_id, /*forced=*/false);
        done = true;
        continue;
      }
      if (token == sp.title_open) {
        if (inside_title) {
          // A second opener inside a run aborts the collected titles.
          degrade_titles();
          degrade_open_title();
        }
        inside_title = true;
        title_text.clear();
        append_serial_token(token, /*forced=*/false);
        continue;
      }
      if (token == sp.title_close) {
        // Only reachable inside a title (masked otherwise).
        titles.push_back(title_text);
        title_text.clear();
        inside_title = false;
        append_serial_token(token, /*forced=*/false);
        continue;
      }
      if (token == sp.para_open) {
        // sample_main() only lets this through after a complete title run.
        append_serial_token(token, /*forced=*/false);
        transcript.push_serial(serial_text);
        serial_text.clear();
        run_stage(transcript);
        continue;
      }
      // Plain content token.
      if (inside_title) {
        title_text += tok.decode(std::span<const int>(&token, 1));
      } else {
        degrade_titles();  // a non-title token invalidates a pending run
        serial_text += tok.decode(std::span<const int>(&token, 1));
      }
      append_serial_token(token, /*forced=*/false);
    }

    degrade_titles();
    if (inside_title) {
      degrade_open_title();
    }
    transcript.push_serial(serial_text);
    serial_text.clear();

    result.transcript = std::move(transcript);
    result.layout = std::move(layout);
    return std::move(result);
  }
};

}  // namespace

DecodeResult decode(GenerativePolicy& policy, std::span<const int> prompt,
                    const EngineConfig& engine_config,
                    const SamplerConfig& sampler_config) {
  Decoder decoder(policy, engine_config, sampler_config);
  return decoder.run(prompt);
}

nlohmann::ordered_json DecodeResult::to_json(bool with_timings) const {
  nlohmann::ordered_json j;
  j["transcript"] = serialize(transcript);
  j["truncated"] = truncated;
  j["steps"] = {{"forward_calls", step_count},
                {"sampled", sampled_step_count},
                {"parallel_sampled", parallel_step_count},
                {"prefill", prefill_step_count},
                {"repositioned", reposition_count}};
  j["tokens"] = {{"prompt", prompt_tokens},
                 {"response", response_tokens},
                 {"serial", serial_tokens},
                 {"parallel", parallel_tokens},
                 {"sampled", sampled_tokens},
                 {"forced", forced_tokens}};
  j["layout"] = layout.to_json();
  if (with_timings) {
    j["seconds"] = {{"serial", serial_seconds},
                    {"parallel", parallel_seconds},
                    {"prefill", prefill_seconds}};
  }
  return j;
}

}  // namespace aspd
