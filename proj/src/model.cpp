#include "aspd/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <utility>

#include <json.hpp>

#include "aspd/errors.hpp"

namespace aspd {

void PositionScheme::validate() const {
  if (kind == Kind::FixedInterval && interval <= 0) {
    throw ConfigError("fixed-interval positions need interval > 0, got " +
                      std::to_string(interval));
  }
}

std::string PositionScheme::name() const {
  switch (kind) {
    case Kind::SameSeq: return "same-seq";
    case Kind::SameMax: return "same-max";
    case Kind::SameRearrange: return "same-rearrange";
    case Kind::FixedInterval:
      return "fixed-interval-" + std::to_string(interval);
  }
  return "unknown";
}

PositionScheme PositionScheme::parse(const std::string& name) {
  PositionScheme s;
  if (name == "same-seq") {
    s.kind = Kind::SameSeq;
  } else if (name == "same-max") {
    s.kind = Kind::SameMax;
  } else if (name == "same-rearrange") {
    s.kind = Kind::SameRearrange;
  } else if (name.rfind("fixed-interval-", 0) == 0) {
    s.kind = Kind::FixedInterval;
    s.interval = std::stoi(name.substr(std::strlen("fixed-interval-")));
  } else {
    throw ConfigError("unknown position scheme \"" + name + "\"");
  }
  s.validate();
  return s;
}

void ModelConfig::validate() const {
  if (vocab_size < SpecialTokens::kCount + 1) {
    throw ConfigError("vocab_size too small");
  }
  if (layers < 1 || heads < 1 || head_dim < 2 || ffn_dim < 1) {
    throw ConfigError("model dimensions must be positive");
  }
  if (head_dim % 2 != 0) {
    throw ConfigError("head_dim must be even for rotary pairs");
  }
  if (max_positions < 1) {
    throw ConfigError("max_positions must be positive");
  }
}

KvCache::KvCache(int layers, int dim) : dim_(dim) {
  if (layers < 1 || dim < 1) {
    throw ConfigError("cache needs positive layer count and dimension");
  }
  keys_.resize(static_cast<std::size_t>(layers));
  values_.resize(static_cast<std::size_t>(layers));
}

std::span<const float> KvCache::keys(int layer) const {
  return keys_.at(static_cast<std::size_t>(layer));
}

std::span<const float> KvCache::values(int layer) const {
  return values_.at(static_cast<std::size_t>(layer));
}

void KvCache::append(int layer, std::span<const float> k,
                     std::span<const float> v) {
  if (k.size() != v.size() || k.size() % static_cast<std::size_t>(dim_) != 0) {
    throw ShapeError("cache append size is not a whole number of tokens");
  }
  auto& kl = keys_.at(static_cast<std::size_t>(layer));
  auto& vl = values_.at(static_cast<std::size_t>(layer));
  kl.insert(kl.end(), k.begin(), k.end());
  vl.insert(vl.end(), v.begin(), v.end());
}

void KvCache::commit(std::size_t count) {
  // Validate before mutating so a failed commit leaves the cache usable.
  std::size_t next = len_ + count;
  for (std::size_t l = 0; l < keys_.size(); ++l) {
    if (keys_[l].size() != next * static_cast<std::size_t>(dim_) ||
        values_[l].size() != next * static_cast<std::size_t>(dim_)) {
      throw ConsistencyError("cache layer " + std::to_string(l) +
                             " is out of step with the committed length");
    }
  }
  len_ = next;
}

void KvCache::truncate(std::size_t keep) {
  if (keep > len_) {
    throw ConsistencyError("cannot truncate the cache to a longer length");
  }
  len_ = keep;
  for (std::size_t l = 0; l < keys_.size(); ++l) {
    keys_[l].resize(len_ * static_cast<std::size_t>(dim_));
    values_[l].resize(len_ * static_cast<std::size_t>(dim_));
  }
}

namespace {

float next_uniform(std::mt19937_64& gen) {
  // Top 24 bits -> [0, 1) with an exactly representable step.
  return static_cast<float>(gen() >> 40) * (1.0f / 16777216.0f);
}

void fill_uniform(std::vector<float>& data, std::mt19937_64& gen, float scale) {
  for (float& v : data) {
    v = (2.0f * next_uniform(gen) - 1.0f) * scale;
  }
}

}  // namespace

template <typename Fn>
void Model::for_each_tensor(Fn&& fn) {
  int hidden = config_.hidden();
  fn("embedding", embedding_,
     static_cast<std::size_t>(config_.vocab_size) * hidden, 0);
  for (int l = 0; l < config_.layers; ++l) {
    LayerWeights& lw = layers_[static_cast<std::size_t>(l)];
    std::string p = "layer" + std::to_string(l) + ".";
    fn(p + "attn_norm", lw.attn_norm, static_cast<std::size_t>(hidden), -1);
    fn(p + "wq", lw.wq, static_cast<std::size_t>(hidden) * hidden, hidden);
    fn(p + "wk", lw.wk, static_cast<std::size_t>(hidden) * hidden, hidden);
    fn(p + "wv", lw.wv, static_cast<std::size_t>(hidden) * hidden, hidden);
    fn(p + "wo", lw.wo, static_cast<std::size_t>(hidden) * hidden, hidden);
    fn(p + "ffn_norm", lw.ffn_norm, static_cast<std::size_t>(hidden), -1);
    fn(p + "w1", lw.w1, static_cast<std::size_t>(config_.ffn_dim) * hidden,
       hidden);
    fn(p + "w2", lw.w2, static_cast<std::size_t>(hidden) * config_.ffn_dim,
       config_.ffn_dim);
  }
  fn("final_norm", final_norm_, static_cast<std::size_t>(hidden), -1);
  fn("lm_head", lm_head_, static_cast<std::size_t>(config_.vocab_size) * hidden,
     hidden);
}

template <typename Fn>
void Model::for_each_tensor(Fn&& fn) const {
  // Read-only visitors reuse the mutable walk; they must not write.
  const_cast<Model&>(*this).for_each_tensor(std::forward<Fn>(fn));
}

Model::Model(const ModelConfig& config, bool initialize)
    : config_(config),
      layers_(static_cast<std::size_t>(config.layers)),
      rotary_(config.head_dim, config.max_positions) {
  config_.validate();
  std::mt19937_64 gen(config_.seed);
  for_each_tensor([&](const std::string&, std::vector<float>& data,
                      std::size_t count, int fan_in) {
    data.resize(count);
    if (!initialize) {
      return;
    }
    if (fan_in < 0) {
      std::fill(data.begin(), data.end(), 1.0f);
    } else if (fan_in == 0) {
      fill_uniform(data, gen, 0.1f);
    } else {
      fill_uniform(data, gen, std::sqrt(1.0f / static_cast<float>(fan_in)));
    }
  });
}

Model::Model(const ModelConfig& config) : Model(config, true) {}

void Model::run(std::span<const int> tokens, std::span<const int> positions,
                const std::vector<std::uint8_t>& mask_bits, std::size_t key_len,
                KvCache* cache, std::vector<float>& logits_out) const {
  int n = static_cast<int>(tokens.size());
  int hidden = config_.hidden();
  if (positions.size() != tokens.size()) {
    throw ShapeError("one position per token required");
  }
  if (mask_bits.size() != tokens.size() * key_len) {
    throw ShapeError("mask has the wrong shape for this step");
  }
  for (int t = 0; t < n; ++t) {
    if (tokens[t] < 0 || tokens[t] >= config_.vocab_size) {
      throw ShapeError("token id " + std::to_string(tokens[t]) +
                       " outside the vocabulary");
    }
  }

  std::vector<float> x(static_cast<std::size_t>(n) * hidden);
  for (int t = 0; t < n; ++t) {
    std::memcpy(x.data() + static_cast<std::ptrdiff_t>(t) * hidden,
                embedding_.data() +
                    static_cast<std::ptrdiff_t>(tokens[t]) * hidden,
                sizeof(float) * static_cast<std::size_t>(hidden));
  }

  std::vector<float> xn(x.size()), q(x.size()), k_new(x.size()), v_new(x.size()),
      attn(x.size()), proj(x.size());
  std::vector<float> ffn(static_cast<std::size_t>(n) * config_.ffn_dim);

  for (int l = 0; l < config_.layers; ++l) {
    const LayerWeights& lw = layers_[static_cast<std::size_t>(l)];
    kernels::rmsnorm(x.data(), lw.attn_norm.data(), xn.data(), n, hidden, 1e-5f);
    kernels::matmul(xn.data(), lw.wq.data(), q.data(), n, hidden, hidden);
    kernels::matmul(xn.data(), lw.wk.data(), k_new.data(), n, hidden, hidden);
    kernels::matmul(xn.data(), lw.wv.data(), v_new.data(), n, hidden, hidden);
    kernels::rotary_inplace(q.data(), n, config_.heads, config_.head_dim,
                            positions.data(), rotary_);
    kernels::rotary_inplace(k_new.data(), n, config_.heads, config_.head_dim,
                            positions.data(), rotary_);

    const float* keys = k_new.data();
    const float* vals = v_new.data();
    if (cache != nullptr) {
      cache->append(l, k_new, v_new);
      keys = cache->keys(l).data();
      vals = cache->values(l).data();
    }
    kernels::masked_attention(q.data(), keys, vals, mask_bits.data(),
                              attn.data(), n, static_cast<int>(key_len),
                              config_.heads, config_.head_dim);
    kernels::matmul(attn.data(), lw.wo.data(), proj.data(), n, hidden, hidden);
    kernels::add_inplace(x.data(), proj.data(), n * hidden);

    kernels::rmsnorm(x.data(), lw.ffn_norm.data(), xn.data(), n, hidden, 1e-5f);
    kernels::matmul(xn.data(), lw.w1.data(), ffn.data(), n, hidden,
                    config_.ffn_dim);
    kernels::gelu_inplace(ffn.data(), n * config_.ffn_dim);
    kernels::matmul(ffn.data(), lw.w2.data(), proj.data(), n, config_.ffn_dim,
                    hidden);
    kernels::add_inplace(x.data(), proj.data(), n * hidden);
  }
  if (cache != nullptr) {
    cache->commit(tokens.size());
  }

  kernels::rmsnorm(x.data(), final_norm_.data(), xn.data(), n, hidden, 1e-5f);
  logits_out.resize(static_cast<std::size_t>(n) * config_.vocab_size);
  kernels::matmul(xn.data(), lm_head_.data(), logits_out.data(), n, hidden,
                  config_.vocab_size);
}

std::vector<float> Model::forward_full(std::span<const int> tokens,
                                       std::span<const int> positions,
                                       const AttentionMask& mask) const {
  if (mask.query_len() != tokens.size() || mask.key_len() != tokens.size()) {
    throw ShapeError("full forward needs a square mask over the sequence");
  }
  std::vector<float> logits;
  run(tokens, positions, mask.dense_bits(), tokens.size(), nullptr, logits);
  return logits;
}

std::vector<float> Model::forward_incremental(
    KvCache& cache, std::span<const int> tokens, std::span<const int> positions,
    std::span<const MaskRow> mask_rows) const {
  if (mask_rows.size() != tokens.size()) {
    throw ShapeError("one mask row per new token required");
  }
  std::size_t key_len = cache.len() + tokens.size();
  std::vector<std::uint8_t> bits(tokens.size() * key_len, 0);
  for (std::size_t i = 0; i < mask_rows.size(); ++i) {
    if (mask_rows[i].width != key_len) {
      throw ConsistencyError(
          "mask row width " + std::to_string(mask_rows[i].width) +
          " does not cover the cache plus the new tokens (" +
          std::to_string(key_len) + ")");
    }
    for (const auto& [b, e] : mask_rows[i].ranges) {
      std::fill(bits.begin() + static_cast<std::ptrdiff_t>(i * key_len + b),
                bits.begin() + static_cast<std::ptrdiff_t>(i * key_len + e),
                std::uint8_t{1});
    }
  }
  std::vector<float> logits;
  run(tokens, positions, bits, key_len, &cache, logits);
  return logits;
}

namespace {
constexpr char kMagic[8] = {'A', 'S', 'P', 'D', 'W', 'G', 'T', '1'};
}

void Model::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["config"] = {{"vocab_size", config_.vocab_size},
                      {"layers", config_.layers},
                      {"heads", config_.heads},
                      {"head_dim", config_.head_dim},
                      {"ffn_dim", config_.ffn_dim},
                      {"max_positions", config_.max_positions},
                      {"seed", config_.seed}};
  header["tensors"] = nlohmann::json::array();
  for_each_tensor([&](const std::string& name, std::vector<float>& data,
                      std::size_t count, int) {
    (void)data;
    header["tensors"].push_back({{"name", name}, {"count", count}});
  });
  header["checksum"] = weight_checksum();
  std::string header_bytes = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot open " + path.string() + " for writing");
  }
  out.write(kMagic, sizeof(kMagic));
  std::uint64_t hlen = header_bytes.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(header_bytes.data(),
            static_cast<std::streamsize>(header_bytes.size()));
  for_each_tensor([&](const std::string&, std::vector<float>& data, std::size_t,
                      int) {
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(float)));
  });
  if (!out) {
    throw Error("failed writing weights to " + path.string());
  }
}

Model Model::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot open " + path.string());
  }
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ValidationError(path.string() + " is not a weights file");
  }
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string header_bytes(hlen, '\0');
  in.read(header_bytes.data(), static_cast<std::streamsize>(hlen));
  if (!in) {
    throw ValidationError(path.string() + " has a truncated header");
  }
  nlohmann::json header = nlohmann::json::parse(header_bytes);

  ModelConfig config;
  const auto& jc = header.at("config");
  config.vocab_size = jc.at("vocab_size").get<int>();
  config.layers = jc.at("layers").get<int>();
  config.heads = jc.at("heads").get<int>();
  config.head_dim = jc.at("head_dim").get<int>();
  config.ffn_dim = jc.at("ffn_dim").get<int>();
  config.max_positions = jc.at("max_positions").get<int>();
  config.seed = jc.at("seed").get<std::uint64_t>();

  Model model(config, false);
  std::size_t tensor_index = 0;
  const auto& tensors = header.at("tensors");
  model.for_each_tensor([&](const std::string& name, std::vector<float>& data,
                            std::size_t count, int) {
    const auto& jt = tensors.at(tensor_index++);
    if (jt.at("name").get<std::string>() != name ||
        jt.at("count").get<std::size_t>() != count) {
      throw ValidationError("weights file tensor list does not match the "
                            "configured architecture at \"" + name + "\"");
    }
    data.resize(count);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
  });
  if (!in) {
    throw ValidationError(path.string() + " is truncated");
  }
  if (header.contains("checksum") &&
      header.at("checksum").get<std::uint64_t>() != model.weight_checksum()) {
    throw ValidationError(path.string() + " failed its weight checksum");
  }
  return model;
}

std::uint64_t Model::weight_checksum() const {
  std::uint64_t hash = 1469598103934665603ull;  // FNV-1a
  auto mix = [&hash](const std::vector<float>& data) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(data.data());
    for (std::size_t i = 0; i < data.size() * sizeof(float); ++i) {
      hash ^= bytes[i];
      hash *= 1099511628211ull;
    }
  };
  for_each_tensor([&](const std::string&, std::vector<float>& data, std::size_t,
                      int) { mix(data); });
  return hash;
}

}  // namespace aspd
