#pragma once

#include <span>
#include <vector>

#include "aspd/model.hpp"

namespace aspd::reference {

/// Plain serial forward pass over one token sequence: strict causal
/// attention (token i attends to tokens 0..i), positions 1..n, no mask
/// objects, no cache, no OpenMP.  Reads the same weights as the parallel
/// implementation and evaluates the same arithmetic in the same order, so on
/// purely serial sequences the logits are bit-identical.  Kept as the
/// independent oracle for the kernel-based forward passes and as the baseline
/// side of the forward benchmark.
std::vector<float> causal_forward(const Model& model, std::span<const int> tokens);

/// Convenience single-row variant: logits of the last token only.
std::vector<float> causal_forward_last(const Model& model,
                                       std::span<const int> tokens);

}  // namespace aspd::reference
