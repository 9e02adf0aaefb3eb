#pragma once

#include <cstdint>
#include <vector>

namespace aspd::kernels {

/// Dense float32 kernels used by the transformer forward pass.  Every kernel
/// parallelizes over independent output elements only (OpenMP), while the
/// reduction inside one output element always runs serially in ascending
/// index order.  Together with -ffp-contract=off this makes results
/// bit-identical regardless of thread count, and bit-identical to the serial
/// reference implementation, which evaluates the same expressions in the same
/// order.

/// out[m x n] = x[m x k] * transpose(w[n x k]).  w is row-major with one
/// output row per row of w (the usual "weights as [out][in]" convention).
void matmul(const float* x, const float* w, float* out, int m, int k, int n);

/// Root-mean-square normalization per row: out = x / rms(x) * gain.
void rmsnorm(const float* x, const float* gain, float* out, int m, int dim,
             float eps);

/// x += y, elementwise.
void add_inplace(float* x, const float* y, int n);

/// Gaussian error linear unit (tanh approximation), elementwise.
void gelu_inplace(float* x, int n);

/// Precomputed rotary tables: cos/sin of pos * 10000^(-2i/head_dim) for every
/// position up to max_position inclusive and every pair index i.
struct RotaryTable {
  int head_dim = 0;
  int max_position = 0;
  std::vector<float> cos_table;  // (max_position + 1) x head_dim/2
  std::vector<float> sin_table;

  RotaryTable() = default;
  RotaryTable(int head_dim, int max_position);
};

/// Rotate query/key pairs in place.  `x` is [tokens x heads*head_dim];
/// `positions[t]` selects the table row for token t.
void rotary_inplace(float* x, int tokens, int heads, int head_dim,
                    const int* positions, const RotaryTable& table);

/// Masked scaled dot-product attention.
///   q:    [nq x heads*head_dim]   (already rotated)
///   k, v: [nk x heads*head_dim]
///   mask: row-major [nq x nk], nonzero where attention is allowed
///   out:  [nq x heads*head_dim]
/// Masked scores contribute exactly zero weight: they are assigned a large
/// negative constant whose exp underflows to 0.0f, so a masked key never
/// perturbs the weighted sum even in the last bit.
void masked_attention(const float* q, const float* k, const float* v,
                      const std::uint8_t* mask, float* out, int nq, int nk,
                      int heads, int head_dim);

}  // namespace aspd::kernels
