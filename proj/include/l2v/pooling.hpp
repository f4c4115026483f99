#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "l2v/error.hpp"
#include "l2v/ops.hpp"
#include "l2v/tensor.hpp"
#include "l2v/tokenizer.hpp"
#include "l2v/transformer.hpp"

namespace l2v {

enum class PoolingMode { Eos, Mean, WeightedMean };

inline std::string_view to_string(PoolingMode m) {
  switch (m) {
    case PoolingMode::Eos: return "eos";
    case PoolingMode::Mean: return "mean";
    case PoolingMode::WeightedMean: return "weighted-mean";
  }
  return "?";
}

inline PoolingMode parse_pooling(std::string_view s) {
  if (s == "eos") return PoolingMode::Eos;
  if (s == "mean") return PoolingMode::Mean;
  if (s == "weighted-mean" || s == "weighted_mean" || s == "wmean") return PoolingMode::WeightedMean;
  throw ConfigError("unknown pooling mode '" + std::string(s) + "'");
}

inline AttentionMode parse_attention_mode(std::string_view s) {
  if (s == "causal") return AttentionMode::Causal;
  if (s == "bidirectional" || s == "bi") return AttentionMode::Bidirectional;
  throw ConfigError("unknown attention mode '" + std::string(s) + "'");
}

/// Per-position pooling weights. Mean: 1/K on each included row.
/// WeightedMean: k / (1 + ... + K) for the k-th included row (1-based).
/// Eos: 1 on the last included row.
template <class T>
std::vector<T> pooling_weights(const std::vector<bool>& include, PoolingMode mode) {
  std::size_t k_total = 0, last = 0;
  for (std::size_t i = 0; i < include.size(); ++i) {
    if (include[i]) {
      ++k_total;
      last = i;
    }
  }
  if (k_total == 0) throw EmptyInputError("pooling over zero positions");
  std::vector<T> w(include.size(), T(0));
  switch (mode) {
    case PoolingMode::Eos:
      w[last] = T(1);
      break;
    case PoolingMode::Mean:
      for (std::size_t i = 0; i < include.size(); ++i)
        if (include[i]) w[i] = T(1) / static_cast<T>(k_total);
      break;
    case PoolingMode::WeightedMean: {
      const double denom = static_cast<double>(k_total) * static_cast<double>(k_total + 1) / 2.0;
      std::size_t k = 0;
      for (std::size_t i = 0; i < include.size(); ++i)
        if (include[i]) w[i] = static_cast<T>(static_cast<double>(++k) / denom);
      break;
    }
  }
  return w;
}

template <class T>
struct PooledEmbedding {
  std::vector<T> vector;
  std::vector<std::size_t> included_positions;
};

/// Differentiable pooling of hidden[T, d] to a [1, d] row.
template <class T>
Tensor<T> pool_tensor(const Tensor<T>& hidden, const std::vector<bool>& include, PoolingMode mode) {
  if (include.size() != hidden.dim(0)) throw ShapeError("pool: include mask length differs from sequence length");
  const std::vector<T> w = pooling_weights<T>(include, mode);
  if (mode == PoolingMode::Eos) {
    std::size_t last = 0;
    for (std::size_t i = 0; i < w.size(); ++i)
      if (w[i] != T(0)) last = i;
    const std::size_t idx[] = {last};
    return gather_rows(hidden, std::span<const std::size_t>(idx));
  }
  return weighted_row_sum(hidden, std::span<const T>(w));
}

template <class T>
PooledEmbedding<T> pool(const Tensor<T>& hidden, const std::vector<bool>& include, PoolingMode mode) {
  PooledEmbedding<T> out;
  const Tensor<T> row = pool_tensor(hidden, include, mode);
  out.vector.assign(row.data().begin(), row.data().end());
  if (mode == PoolingMode::Eos) {
    for (std::size_t i = include.size(); i-- > 0;)
      if (include[i]) {
        out.included_positions.push_back(i);
        break;
      }
  } else {
    for (std::size_t i = 0; i < include.size(); ++i)
      if (include[i]) out.included_positions.push_back(i);
  }
  return out;
}

/// Token ids with the positions that pooling may read.
struct PoolSpec {
  std::vector<int> ids;
  std::vector<bool> include;
};

/// BOS + instruction + text + EOS; include covers text and EOS. The
/// instruction and text token streams are concatenated without a separator.
inline PoolSpec build_pool_spec(const Vocab& vocab, std::string_view instruction, std::string_view text,
                                std::size_t max_len) {
  if (text.empty()) throw EmptyInputError("embedding text is empty");
  const TokenSequence instr = vocab.encode(instruction);
  const TokenSequence body = vocab.encode(text);
  const std::size_t total = 2 + instr.size() + body.size();
  if (total > max_len) {
    throw LengthError("input needs " + std::to_string(total) + " tokens, budget is " + std::to_string(max_len));
  }
  PoolSpec spec;
  spec.ids.push_back(kBos);
  spec.ids.insert(spec.ids.end(), instr.ids.begin(), instr.ids.end());
  spec.ids.insert(spec.ids.end(), body.ids.begin(), body.ids.end());
  spec.ids.push_back(kEos);
  spec.include.assign(total, false);
  for (std::size_t i = 1 + instr.size(); i < total; ++i) spec.include[i] = true;
  return spec;
}

/// Echo layout: BOS + instr + text + instr + text + EOS, reading only the
/// second copy of the text.
inline PoolSpec build_echo_spec(const Vocab& vocab, std::string_view instruction, std::string_view text,
                                std::size_t max_len) {
  if (text.empty()) throw EmptyInputError("embedding text is empty");
  const TokenSequence instr = vocab.encode(instruction);
  const TokenSequence body = vocab.encode(text);
  const std::size_t copy = instr.size() + body.size();
  const std::size_t total = 2 + 2 * copy;
  if (total > max_len) {
    throw LengthError("echo input needs " + std::to_string(total) + " tokens, budget is " +
                      std::to_string(max_len));
  }
  PoolSpec spec;
  spec.ids.push_back(kBos);
  for (int rep = 0; rep < 2; ++rep) {
    spec.ids.insert(spec.ids.end(), instr.ids.begin(), instr.ids.end());
    spec.ids.insert(spec.ids.end(), body.ids.begin(), body.ids.end());
  }
  spec.ids.push_back(kEos);
  spec.include.assign(total, false);
  const std::size_t second_text = 1 + copy + instr.size();
  for (std::size_t i = second_text; i < second_text + body.size(); ++i) spec.include[i] = true;
  return spec;
}

struct EmbeddingRequest {
  std::string instruction;
  std::string text;
  PoolingMode pooling = PoolingMode::Mean;
  AttentionMode mode = AttentionMode::Bidirectional;
};

template <TransformerWeights M>
PooledEmbedding<typename M::scalar_type> embed_spec(const M& model, const PoolSpec& spec, PoolingMode pooling,
                                                    AttentionMode mode) {
  ForwardOptions opts;
  opts.mode = mode;
  opts.compute_logits = false;
  const auto trace = forward(model, spec.ids, opts);
  return pool(trace.output(), spec.include, pooling);
}

/// Deterministic sequence embedding (dropout off).
template <TransformerWeights M>
PooledEmbedding<typename M::scalar_type> embed(const M& model, const EmbeddingRequest& req, const Vocab& vocab) {
  const PoolSpec spec = build_pool_spec(vocab, req.instruction, req.text, model.config().max_seq_len);
  return embed_spec(model, spec, req.pooling, req.mode);
}

/// Echo-embedding baseline. Causal mode only.
template <TransformerWeights M>
PooledEmbedding<typename M::scalar_type> embed_echo(const M& model, const EmbeddingRequest& req,
                                                    const Vocab& vocab) {
  if (req.mode != AttentionMode::Causal) {
    throw ConfigError("echo embeddings are a causal-attention baseline; bidirectional mode is rejected");
  }
  const PoolSpec spec = build_echo_spec(vocab, req.instruction, req.text, model.config().max_seq_len);
  return embed_spec(model, spec, req.pooling, AttentionMode::Causal);
}

}  // namespace l2v
