#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "l2v/data.hpp"
#include "l2v/error.hpp"
#include "l2v/ops.hpp"
#include "l2v/pooling.hpp"
#include "l2v/rng.hpp"
#include "l2v/tensor.hpp"
#include "l2v/tokenizer.hpp"
#include "l2v/transformer.hpp"

namespace l2v {

// ---------------------------------------------------------------------------
// Masking

enum class MaskingStrategy {
  BertStyle,     // selected: 80% MASK, 10% random token, 10% unchanged
  RobertaStyle,  // selected: 100% MASK
};

inline std::string_view to_string(MaskingStrategy s) {
  return s == MaskingStrategy::BertStyle ? "bert" : "roberta";
}

inline MaskingStrategy parse_masking_strategy(std::string_view s) {
  if (s == "bert") return MaskingStrategy::BertStyle;
  if (s == "roberta") return MaskingStrategy::RobertaStyle;
  throw ConfigError("unknown masking strategy '" + std::string(s) + "'");
}

struct MaskingConfig {
  MaskingStrategy strategy = MaskingStrategy::BertStyle;
  double mask_prob = 0.2;

  void validate() const {
    if (!(mask_prob > 0.0 && mask_prob <= 1.0)) throw ConfigError("mask_prob must lie in (0, 1]");
  }
};

struct Supervision {
  std::size_t row = 0;
  std::size_t position = 0;
  int original = 0;
  bool operator==(const Supervision&) const = default;
};

/// Masked rows (ragged, no padding) plus the supervised positions.
struct MaskedBatch {
  std::vector<std::vector<int>> input_ids;
  std::vector<Supervision> supervision;
  std::size_t skipped_rows = 0;  // rows too short to mask
};

/// Selects each non-special position i >= 1 independently with probability
/// p. Draw order per row, per position: one uniform for selection; under
/// BertStyle, a selected position draws one more uniform for the 80/10/10
/// split and, when replaced at random, one more for the token id (uniform
/// over non-special ids).
inline MaskedBatch apply_masking(const std::vector<std::vector<int>>& rows, const MaskingConfig& cfg,
                                 std::size_t vocab_size, CounterRng& rng) {
  cfg.validate();
  if (vocab_size <= static_cast<std::size_t>(kNumSpecial)) throw ConfigError("vocabulary has no regular tokens");
  MaskedBatch out;
  out.input_ids.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::vector<int> ids = rows[r];
    if (ids.empty() || ids.front() != kBos) throw DataError("masking expects rows that start with BOS");
    if (ids.size() < 2) {
      ++out.skipped_rows;
      out.input_ids.push_back(std::move(ids));
      continue;
    }
    for (std::size_t i = 1; i < ids.size(); ++i) {
      if (Vocab::is_special(ids[i])) continue;
      if (!(rng.uniform() < cfg.mask_prob)) continue;
      out.supervision.push_back({r, i, ids[i]});
      if (cfg.strategy == MaskingStrategy::RobertaStyle) {
        ids[i] = kMask;
        continue;
      }
      const double u = rng.uniform();
      if (u < 0.8) {
        ids[i] = kMask;
      } else if (u < 0.9) {
        ids[i] = kNumSpecial + static_cast<int>(rng.below(vocab_size - kNumSpecial));
      }
    }
    out.input_ids.push_back(std::move(ids));
  }
  return out;
}

// ---------------------------------------------------------------------------
// MNTP

struct MntpOptions {
  double dropout_p = 0.0;
  CounterRng* rng = nullptr;
  /// Instrumentation: (row, position) pairs whose last hidden state is zeroed
  /// before the head reads it.
  std::vector<std::pair<std::size_t, std::size_t>> zero_hidden;
};

/// Mean over supervision records of cross-entropy between the logits at
/// position i-1 and the original token at i. Bidirectional attention.
template <TransformerWeights M>
Tensor<typename M::scalar_type> mntp_loss(const M& model, const MaskedBatch& batch, const MntpOptions& opts = {}) {
  using T = typename M::scalar_type;
  if (batch.supervision.empty()) throw EmptyInputError("MNTP batch has no supervised positions");
  std::vector<std::vector<std::size_t>> reads(batch.input_ids.size());
  std::vector<std::vector<std::size_t>> targets(batch.input_ids.size());
  for (const auto& s : batch.supervision) {
    if (s.row >= batch.input_ids.size() || s.position == 0 || s.position >= batch.input_ids[s.row].size()) {
      throw IndexError("supervision record outside its row");
    }
    reads[s.row].push_back(s.position - 1);
    targets[s.row].push_back(static_cast<std::size_t>(s.original));
  }
  std::vector<Tensor<T>> rows;
  std::vector<std::size_t> flat_targets;
  for (std::size_t r = 0; r < batch.input_ids.size(); ++r) {
    if (reads[r].empty()) continue;
    ForwardOptions fo;
    fo.mode = AttentionMode::Bidirectional;
    fo.dropout_p = opts.dropout_p;
    fo.rng = opts.rng;
    fo.compute_logits = false;
    for (const auto& [zr, zp] : opts.zero_hidden) {
      if (zr != r) continue;
      if (fo.keep_final_rows.empty()) fo.keep_final_rows.assign(batch.input_ids[r].size(), true);
      fo.keep_final_rows.at(zp) = false;
    }
    const auto trace = forward(model, batch.input_ids[r], fo);
    rows.push_back(gather_rows(trace.normed, std::span<const std::size_t>(reads[r])));
    flat_targets.insert(flat_targets.end(), targets[r].begin(), targets[r].end());
  }
  const Tensor<T> logits = matmul(concat_rows(rows), model.weight("head"));
  return cross_entropy(logits, std::span<const std::size_t>(flat_targets));
}

// ---------------------------------------------------------------------------
// Contrastive

/// Similarity is cosine; logits are s / temperature (the inverse of the
/// multiplicative temperature form).
struct ContrastiveConfig {
  double temperature = 0.05;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  }
};

/// mean_i -log( exp(s(q_i, c_{t_i})/tau) / sum_j exp(s(q_i, c_j)/tau) ).
template <class T>
Tensor<T> info_nce(const Tensor<T>& queries, const Tensor<T>& candidates, std::span<const std::size_t> targets,
                   const ContrastiveConfig& cfg) {
  cfg.validate();
  const Tensor<T> sims = cosine_matrix(queries, candidates);
  return cross_entropy(scale(sims, static_cast<T>(1.0 / cfg.temperature)), targets);
}

/// Maps a pool spec to a [1, d] embedding; dropout_p and rng drive dropout.
template <class T>
using Encoder = std::function<Tensor<T>(const PoolSpec&, double dropout_p, CounterRng* rng)>;

/// Bidirectional forward, pooled over spec.include.
template <TransformerWeights M>
Encoder<typename M::scalar_type> model_encoder(const M& model, PoolingMode pooling = PoolingMode::Mean,
                                               AttentionMode mode = AttentionMode::Bidirectional) {
  return [&model, pooling, mode](const PoolSpec& spec, double p, CounterRng* rng) {
    ForwardOptions fo;
    fo.mode = mode;
    fo.dropout_p = p;
    fo.rng = rng;
    fo.compute_logits = false;
    const auto trace = forward(model, spec.ids, fo);
    return pool_tensor(trace.output(), spec.include, pooling);
  };
}

/// SimCSE: every sentence is encoded twice (one full pass over the batch,
/// then a second), each with fresh dropout; view two of sentence i is the
/// positive for view one and other sentences' second views are negatives.
template <class T>
Tensor<T> simcse_loss(const Encoder<T>& encoder, const std::vector<PoolSpec>& batch, const ContrastiveConfig& cfg,
                      double dropout_p, CounterRng& rng) {
  if (batch.empty()) throw EmptyInputError("SimCSE batch is empty");
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout_p must lie in [0, 1)");
  std::vector<Tensor<T>> first, second;
  for (const auto& s : batch) first.push_back(encoder(s, dropout_p, &rng));
  for (const auto& s : batch) second.push_back(encoder(s, dropout_p, &rng));
  std::vector<std::size_t> targets(batch.size());
  for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = i;
  return info_nce(concat_rows(first), concat_rows(second), std::span<const std::size_t>(targets), cfg);
}

template <TransformerWeights M>
Tensor<typename M::scalar_type> simcse_loss(const M& model, const std::vector<PoolSpec>& batch,
                                            const ContrastiveConfig& cfg, double dropout_p, CounterRng& rng) {
  return simcse_loss<typename M::scalar_type>(model_encoder(model), batch, cfg, dropout_p, rng);
}

/// Tokenized supervised example: the query carries the instruction (excluded
/// from pooling); documents carry none.
struct ContrastiveItem {
  PoolSpec query;
  PoolSpec positive;
  std::vector<PoolSpec> negatives;
};

inline ContrastiveItem tokenize_example(const Vocab& vocab, const ContrastiveExample& ex, std::size_t max_len) {
  ContrastiveItem item;
  item.query = build_pool_spec(vocab, ex.instruction, ex.query, max_len);
  item.positive = build_pool_spec(vocab, "", ex.positive, max_len);
  for (const auto& neg : ex.hard_negatives) item.negatives.push_back(build_pool_spec(vocab, "", neg, max_len));
  return item;
}

/// Candidates for every query: all in-batch positives followed by all hard
/// negatives; query i targets positive i.
template <class T>
Tensor<T> supervised_contrastive_loss(const Encoder<T>& encoder, const std::vector<ContrastiveItem>& batch,
                                      const ContrastiveConfig& cfg, double dropout_p = 0.0,
                                      CounterRng* rng = nullptr) {
  if (batch.empty()) throw EmptyInputError("contrastive batch is empty");
  std::vector<Tensor<T>> queries, candidates;
  for (const auto& item : batch) queries.push_back(encoder(item.query, dropout_p, rng));
  for (const auto& item : batch) candidates.push_back(encoder(item.positive, dropout_p, rng));
  for (const auto& item : batch)
    for (const auto& neg : item.negatives) candidates.push_back(encoder(neg, dropout_p, rng));
  std::vector<std::size_t> targets(batch.size());
  for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = i;
  return info_nce(concat_rows(queries), concat_rows(candidates), std::span<const std::size_t>(targets), cfg);
}

template <TransformerWeights M>
Tensor<typename M::scalar_type> supervised_contrastive_loss(const M& model, const std::vector<ContrastiveItem>& batch,
                                                            const ContrastiveConfig& cfg, double dropout_p = 0.0,
                                                            CounterRng* rng = nullptr) {
  return supervised_contrastive_loss<typename M::scalar_type>(model_encoder(model), batch, cfg, dropout_p, rng);
}

}  // namespace l2v
