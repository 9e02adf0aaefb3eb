#include "aspd/kernels.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "aspd/errors.hpp"

namespace aspd::kernels {

namespace {
// Large negative score for masked positions.  expf() of any value this low
// underflows to exactly 0.0f after max subtraction, so masked keys add a true
// zero to both the normalizer and the weighted sum.
constexpr float kMaskedScore = -1e9f;
}  // namespace

void matmul(const float* x, const float* w, float* out, int m, int k, int n) {
#pragma omp parallel for collapse(2) schedule(static)
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      const float* xi = x + static_cast<std::ptrdiff_t>(i) * k;
      const float* wj = w + static_cast<std::ptrdiff_t>(j) * k;
      float acc = 0.0f;
      for (int t = 0; t < k; ++t) {
        acc += xi[t] * wj[t];
      }
      out[static_cast<std::ptrdiff_t>(i) * n + j] = acc;
    }
  }
}

void rmsnorm(const float* x, const float* gain, float* out, int m, int dim,
             float eps) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    const float* xi = x + static_cast<std::ptrdiff_t>(i) * dim;
    float* oi = out + static_cast<std::ptrdiff_t>(i) * dim;
    float sum_sq = 0.0f;
    for (int t = 0; t < dim; ++t) {
      sum_sq += xi[t] * xi[t];
    }
    float inv = 1.0f / std::sqrt(sum_sq / static_cast<float>(dim) + eps);
    for (int t = 0; t < dim; ++t) {
      oi[t] = xi[t] * inv * gain[t];
    }
  }
}

void add_inplace(float* x, const float* y, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    x[i] += y[i];
  }
}

void gelu_inplace(float* x, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    float v = x[i];
    float cube = v * v * v;
    x[i] = 0.5f * v * (1.0f + std::tanh(0.7978845608f * (v + 0.044715f * cube)));
  }
}

RotaryTable::RotaryTable(int head_dim_in, int max_position_in)
    : head_dim(head_dim_in), max_position(max_position_in) {
  if (head_dim % 2 != 0) {
    throw ConfigError("rotary embedding needs an even head dimension");
  }
  int half = head_dim / 2;
  cos_table.resize(static_cast<std::size_t>(max_position + 1) * half);
  sin_table.resize(static_cast<std::size_t>(max_position + 1) * half);
  for (int pos = 0; pos <= max_position; ++pos) {
    for (int i = 0; i < half; ++i) {
      float freq = std::pow(10000.0f, -2.0f * static_cast<float>(i) /
                                          static_cast<float>(head_dim));
      float angle = static_cast<float>(pos) * freq;
      cos_table[static_cast<std::size_t>(pos) * half + i] = std::cos(angle);
      sin_table[static_cast<std::size_t>(pos) * half + i] = std::sin(angle);
    }
  }
}

void rotary_inplace(float* x, int tokens, int heads, int head_dim,
                    const int* positions, const RotaryTable& table) {
  if (head_dim != table.head_dim) {
    throw ShapeError("rotary table head dimension mismatch");
  }
  for (int t = 0; t < tokens; ++t) {  // validate before entering the parallel region
    if (positions[t] < 0 || positions[t] > table.max_position) {
      throw ShapeError("position " + std::to_string(positions[t]) +
                       " outside the rotary table");
    }
  }
  int half = head_dim / 2;
#pragma omp parallel for collapse(2) schedule(static)
  for (int t = 0; t < tokens; ++t) {
    for (int h = 0; h < heads; ++h) {
      int pos = positions[t];
      float* xh = x + (static_cast<std::ptrdiff_t>(t) * heads + h) * head_dim;
      const float* cr = table.cos_table.data() +
                        static_cast<std::ptrdiff_t>(pos) * half;
      const float* sr = table.sin_table.data() +
                        static_cast<std::ptrdiff_t>(pos) * half;
      for (int i = 0; i < half; ++i) {
        float a = xh[2 * i];
        float b = xh[2 * i + 1];
        xh[2 * i] = a * cr[i] - b * sr[i];
        xh[2 * i + 1] = a * sr[i] + b * cr[i];
      }
    }
  }
}

void masked_attention(const float* q, const float* k, const float* v,
                      const std::uint8_t* mask, float* out, int nq, int nk,
                      int heads, int head_dim) {
  float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
  int dim = heads * head_dim;
#pragma omp parallel for collapse(2) schedule(static)
  for (int qi = 0; qi < nq; ++qi) {
    for (int h = 0; h < heads; ++h) {
      const float* qh =
          q + static_cast<std::ptrdiff_t>(qi) * dim + h * head_dim;
      const std::uint8_t* mrow = mask + static_cast<std::ptrdiff_t>(qi) * nk;
      std::vector<float> scores(static_cast<std::size_t>(nk));
      for (int j = 0; j < nk; ++j) {
        if (mrow[j]) {
          const float* kh =
              k + static_cast<std::ptrdiff_t>(j) * dim + h * head_dim;
          float dot = 0.0f;
          for (int t = 0; t < head_dim; ++t) {
            dot += qh[t] * kh[t];
          }
          scores[j] = dot * scale;
        } else {
          scores[j] = kMaskedScore;
        }
      }
      float max_score = kMaskedScore;
      for (int j = 0; j < nk; ++j) {
        if (scores[j] > max_score) max_score = scores[j];
      }
      float denom = 0.0f;
      for (int j = 0; j < nk; ++j) {
        scores[j] = std::exp(scores[j] - max_score);
        denom += scores[j];
      }
      float* oh = out + static_cast<std::ptrdiff_t>(qi) * dim + h * head_dim;
      for (int t = 0; t < head_dim; ++t) {
        oh[t] = 0.0f;
      }
      for (int j = 0; j < nk; ++j) {
        float weight = scores[j] / denom;
        if (weight != 0.0f) {
          const float* vh =
              v + static_cast<std::ptrdiff_t>(j) * dim + h * head_dim;
          for (int t = 0; t < head_dim; ++t) {
            oh[t] += weight * vh[t];
          }
        }
      }
    }
  }
}

}  // namespace aspd::kernels
