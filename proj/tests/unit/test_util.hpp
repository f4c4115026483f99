#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "l2v/rng.hpp"
#include "l2v/tensor.hpp"
#include "l2v/transformer.hpp"

namespace l2v::test {

template <class T>
Tensor<T> randn(Shape shape, CounterRng& rng, double std = 1.0, bool grad = true) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(std * rng.normal());
  return Tensor<T>(std::move(shape), std::move(v), grad);
}

inline ModelConfig tiny_config(std::size_t vocab = 40, std::size_t layers = 2, std::size_t d = 16) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = d;
  c.n_heads = 2;
  c.n_layers = layers;
  c.d_ff = 2 * d;
  c.max_seq_len = 32;
  return c;
}

/// init_model with larger weights so that outputs differ visibly between inputs.
template <class T>
Model<T> scaled_model(const ModelConfig& c, std::uint64_t seed, double std = 0.3) {
  Model<T> m = init_model<T>(c, seed);
  CounterRng rng(seed, 99);
  for (const auto& [name, shape] : weight_layout(c)) {
    if (is_norm_weight(name)) continue;
    for (auto& v : m.weight(name).mutable_data()) v = static_cast<T>(std * rng.normal());
  }
  return m;
}

inline std::vector<int> random_ids(CounterRng& rng, std::size_t n, std::size_t vocab, int lo = 4) {
  std::vector<int> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(lo + static_cast<int>(rng.below(vocab - lo)));
  return ids;
}

inline std::string source_path(const std::string& rel) { return std::string(L2V_SOURCE_DIR) + "/" + rel; }

}  // namespace l2v::test
