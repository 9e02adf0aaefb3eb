// Compares the parallel kernels against the plain serial reference on the
// same causal workload, plus the cache-backed step path the decoder uses.

#include <benchmark/benchmark.h>

#include <vector>

#include "aspd/layout.hpp"
#include "aspd/mask.hpp"
#include "aspd/model.hpp"
#include "aspd/reference_model.hpp"

namespace {

const aspd::Model& shared_model() {
  static aspd::Model model = [] {
    aspd::ModelConfig config;
    config.layers = 2;
    config.heads = 2;
    config.head_dim = 16;
    config.ffn_dim = 64;
    config.seed = 7;
    return aspd::Model(config);
  }();
  return model;
}

std::vector<int> make_tokens(int count) {
  std::vector<int> tokens(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    tokens[static_cast<std::size_t>(i)] = 'a' + (i * 31) % 26;
  }
  return tokens;
}

// Serial causal layout: positions 1..n and a lower-triangular mask.
struct CausalInputs {
  std::vector<int> tokens;
  std::vector<int> positions;
  aspd::AttentionMask mask;
};

CausalInputs make_causal(int count) {
  CausalInputs in;
  in.tokens = make_tokens(count);
  aspd::SequenceLayout layout;
  for (int id : in.tokens) {
    layout.append_serial(id);
  }
  for (const aspd::TokenMeta& meta : layout.flattened()) {
    in.positions.push_back(meta.position_id);
  }
  in.mask = aspd::build_full_mask(layout, aspd::VisibilityMode::Independent);
  return in;
}

void BM_ReferenceForward(benchmark::State& state) {
  const aspd::Model& model = shared_model();
  std::vector<int> tokens = make_tokens(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    std::vector<float> logits = aspd::reference::causal_forward(model, tokens);
    benchmark::DoNotOptimize(logits.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_KernelForward(benchmark::State& state) {
  const aspd::Model& model = shared_model();
  CausalInputs in = make_causal(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    std::vector<float> logits =
        model.forward_full(in.tokens, in.positions, in.mask);
    benchmark::DoNotOptimize(logits.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_KernelIncremental(benchmark::State& state) {
  const aspd::Model& model = shared_model();
  CausalInputs in = make_causal(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    aspd::KvCache cache = model.make_cache();
    for (std::size_t t = 0; t < in.tokens.size(); ++t) {
      aspd::MaskRow row;
      row.width = t + 1;
      row.ranges.push_back({0, t + 1});
      int token = in.tokens[t];
      int position = in.positions[t];
      std::vector<float> logits = model.forward_incremental(
          cache, std::span<const int>(&token, 1),
          std::span<const int>(&position, 1), std::span<const aspd::MaskRow>(&row, 1));
      benchmark::DoNotOptimize(logits.data());
    }
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

}  // namespace

BENCHMARK(BM_ReferenceForward)->Arg(16)->Arg(64)->Arg(128);
BENCHMARK(BM_KernelForward)->Arg(16)->Arg(64)->Arg(128);
BENCHMARK(BM_KernelIncremental)->Arg(16)->Arg(64)->Arg(128);

BENCHMARK_MAIN();
