#include "aspd/reference_model.hpp"

#include <cmath>
#include <cstring>

#include "aspd/errors.hpp"

namespace aspd::reference {

namespace {

// The helpers below mirror the arithmetic of the parallel kernels expression
// for expression (same accumulation order, no contraction) but are written as
// straight serial loops with none of the masking or caching machinery.

void norm_row(const float* x, const float* gain, float* out, int dim) {
  float sum_sq = 0.0f;
  for (int t = 0; t < dim; ++t) {
    sum_sq += x[t] * x[t];
  }
  float inv = 1.0f / std::sqrt(sum_sq / static_cast<float>(dim) + 1e-5f);
  for (int t = 0; t < dim; ++t) {
    out[t] = x[t] * inv * gain[t];
  }
}

void project_row(const float* x, const float* w, float* out, int in_dim,
                 int out_dim) {
  for (int j = 0; j < out_dim; ++j) {
    float acc = 0.0f;
    const float* wj = w + static_cast<std::ptrdiff_t>(j) * in_dim;
    for (int t = 0; t < in_dim; ++t) {
      acc += x[t] * wj[t];
    }
    out[j] = acc;
  }
}

void rotate_row(float* x, int heads, int head_dim, int position) {
  int half = head_dim / 2;
  for (int h = 0; h < heads; ++h) {
    float* xh = x + static_cast<std::ptrdiff_t>(h) * head_dim;
    for (int i = 0; i < half; ++i) {
      float freq = std::pow(10000.0f, -2.0f * static_cast<float>(i) /
                                          static_cast<float>(head_dim));
      float angle = static_cast<float>(position) * freq;
      float c = std::cos(angle);
      float s = std::sin(angle);
      float a = xh[2 * i];
      float b = xh[2 * i + 1];
      xh[2 * i] = a * c - b * s;
      xh[2 * i + 1] = a * s + b * c;
    }
  }
}

}  // namespace

std::vector<float> causal_forward(const Model& model,
                                  std::span<const int> tokens) {
  const ModelConfig& cfg = model.config();
  int n = static_cast<int>(tokens.size());
  int hidden = cfg.hidden();
  if (n == 0) {
    return {};
  }
  for (int t = 0; t < n; ++t) {
    if (tokens[t] < 0 || tokens[t] >= cfg.vocab_size) {
      throw ShapeError("token id outside the vocabulary");
    }
  }

  std::vector<float> x(static_cast<std::size_t>(n) * hidden);
  for (int t = 0; t < n; ++t) {
    std::memcpy(x.data() + static_cast<std::ptrdiff_t>(t) * hidden,
                model.embedding().data() +
                    static_cast<std::ptrdiff_t>(tokens[t]) * hidden,
                sizeof(float) * static_cast<std::size_t>(hidden));
  }

  std::vector<float> xn(x.size()), q(x.size()), k(x.size()), v(x.size());
  std::vector<float> row(static_cast<std::size_t>(hidden));
  std::vector<float> ffn(static_cast<std::size_t>(cfg.ffn_dim));
  float scale = 1.0f / std::sqrt(static_cast<float>(cfg.head_dim));

  for (int l = 0; l < cfg.layers; ++l) {
    const Model::LayerWeights& lw = model.layer(l);
    for (int t = 0; t < n; ++t) {
      const float* xt = x.data() + static_cast<std::ptrdiff_t>(t) * hidden;
      float* xnt = xn.data() + static_cast<std::ptrdiff_t>(t) * hidden;
      norm_row(xt, lw.attn_norm.data(), xnt, hidden);
      project_row(xnt, lw.wq.data(),
                  q.data() + static_cast<std::ptrdiff_t>(t) * hidden, hidden,
                  hidden);
      project_row(xnt, lw.wk.data(),
                  k.data() + static_cast<std::ptrdiff_t>(t) * hidden, hidden,
                  hidden);
      project_row(xnt, lw.wv.data(),
                  v.data() + static_cast<std::ptrdiff_t>(t) * hidden, hidden,
                  hidden);
      rotate_row(q.data() + static_cast<std::ptrdiff_t>(t) * hidden, cfg.heads,
                 cfg.head_dim, t + 1);
      rotate_row(k.data() + static_cast<std::ptrdiff_t>(t) * hidden, cfg.heads,
                 cfg.head_dim, t + 1);
    }
    for (int t = 0; t < n; ++t) {
      for (int h = 0; h < cfg.heads; ++h) {
        const float* qh = q.data() +
                          (static_cast<std::ptrdiff_t>(t) * cfg.heads + h) *
                              cfg.head_dim;
        std::vector<float> scores(static_cast<std::size_t>(t) + 1);
        for (int j = 0; j <= t; ++j) {
          const float* kh = k.data() +
                            (static_cast<std::ptrdiff_t>(j) * cfg.heads + h) *
                                cfg.head_dim;
          float dot = 0.0f;
          for (int d = 0; d < cfg.head_dim; ++d) {
            dot += qh[d] * kh[d];
          }
          scores[static_cast<std::size_t>(j)] = dot * scale;
        }
        float max_score = scores[0];
        for (int j = 1; j <= t; ++j) {
          if (scores[static_cast<std::size_t>(j)] > max_score) {
            max_score = scores[static_cast<std::size_t>(j)];
          }
        }
        float denom = 0.0f;
        for (int j = 0; j <= t; ++j) {
          scores[static_cast<std::size_t>(j)] =
              std::exp(scores[static_cast<std::size_t>(j)] - max_score);
          denom += scores[static_cast<std::size_t>(j)];
        }
        float* oh = row.data() + static_cast<std::ptrdiff_t>(h) * cfg.head_dim;
        for (int d = 0; d < cfg.head_dim; ++d) {
          oh[d] = 0.0f;
        }
        for (int j = 0; j <= t; ++j) {
          float weight = scores[static_cast<std::size_t>(j)] / denom;
          if (weight != 0.0f) {
            const float* vh = v.data() +
                              (static_cast<std::ptrdiff_t>(j) * cfg.heads + h) *
                                  cfg.head_dim;
            for (int d = 0; d < cfg.head_dim; ++d) {
              oh[d] += weight * vh[d];
            }
          }
        }
      }
      // row now holds the attention output for token t across all heads
      float* xt = x.data() + static_cast<std::ptrdiff_t>(t) * hidden;
      std::vector<float> proj(static_cast<std::size_t>(hidden));
      project_row(row.data(), lw.wo.data(), proj.data(), hidden, hidden);
      for (int d = 0; d < hidden; ++d) {
        xt[d] += proj[d];
      }
    }
    for (int t = 0; t < n; ++t) {
      float* xt = x.data() + static_cast<std::ptrdiff_t>(t) * hidden;
      float* xnt = xn.data() + static_cast<std::ptrdiff_t>(t) * hidden;
      norm_row(xt, lw.ffn_norm.data(), xnt, hidden);
      project_row(xnt, lw.w1.data(), ffn.data(), hidden, cfg.ffn_dim);
      for (int d = 0; d < cfg.ffn_dim; ++d) {
        float val = ffn[static_cast<std::size_t>(d)];
        float cube = val * val * val;
        ffn[static_cast<std::size_t>(d)] =
            0.5f * val *
            (1.0f + std::tanh(0.7978845608f * (val + 0.044715f * cube)));
      }
      std::vector<float> proj(static_cast<std::size_t>(hidden));
      project_row(ffn.data(), lw.w2.data(), proj.data(), cfg.ffn_dim, hidden);
      for (int d = 0; d < hidden; ++d) {
        xt[d] += proj[d];
      }
    }
  }

  std::vector<float> logits(static_cast<std::size_t>(n) * cfg.vocab_size);
  for (int t = 0; t < n; ++t) {
    const float* xt = x.data() + static_cast<std::ptrdiff_t>(t) * hidden;
    float* xnt = xn.data() + static_cast<std::ptrdiff_t>(t) * hidden;
    norm_row(xt, model.final_norm().data(), xnt, hidden);
    project_row(xnt, model.lm_head().data(),
                logits.data() + static_cast<std::ptrdiff_t>(t) * cfg.vocab_size,
                hidden, cfg.vocab_size);
  }
  return logits;
}

std::vector<float> causal_forward_last(const Model& model,
                                       std::span<const int> tokens) {
  std::vector<float> all = causal_forward(model, tokens);
  std::size_t vocab = static_cast<std::size_t>(model.config().vocab_size);
  return std::vector<float>(all.end() - static_cast<std::ptrdiff_t>(vocab),
                            all.end());
}

}  // namespace aspd::reference
