#pragma once

#include <cstddef>
#include <fstream>
#include <iomanip>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "l2v/data.hpp"
#include "l2v/error.hpp"
#include "l2v/ops.hpp"
#include "l2v/pooling.hpp"
#include "l2v/tokenizer.hpp"
#include "l2v/transformer.hpp"

namespace l2v {

struct TripleScore {
  double positive = 0.0;  // sim(q, s+)
  double negative = 0.0;  // sim(q, s-)
};

struct TripleReport {
  std::vector<TripleScore> scores;
  double mean_positive = 0.0;
  double mean_negative = 0.0;
  double separation = 0.0;
  double fraction_correct = 0.0;  // share with sim(q,s+) > sim(q,s-)
  std::size_t skipped = 0;

  nlohmann::json to_json() const {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& s : scores) per.push_back({{"positive", s.positive}, {"negative", s.negative}});
    return {{"mean_positive", mean_positive}, {"mean_negative", mean_negative}, {"separation", separation},
            {"fraction_correct", fraction_correct}, {"skipped", skipped}, {"n", scores.size()},
            {"triples", per}};
  }
};

/// BOS + sentence + EOS, with pooling restricted to tokens inside the first
/// `prefix_bytes` bytes.
inline PoolSpec build_prefix_spec(const Vocab& vocab, const std::string& sentence, std::size_t prefix_bytes,
                                  std::size_t max_len) {
  const TokenSequence seq = vocab.encode(sentence, true, true);
  if (seq.size() > max_len) {
    throw LengthError("sentence needs " + std::to_string(seq.size()) + " tokens, budget is " +
                      std::to_string(max_len));
  }
  PoolSpec spec;
  spec.ids = seq.ids;
  spec.include.assign(seq.size(), false);
  for (std::size_t i = 1; i + 1 < seq.size(); ++i) spec.include[i] = seq.spans[i].end <= prefix_bytes;
  return spec;
}

/// Encodes q = A+B, s+ = A+C, s- = A+D and pools over A's tokens only.
template <TransformerWeights M>
TripleReport prefix_triple_similarity(const M& model, const Vocab& vocab, const std::vector<PrefixTriple>& triples,
                                      PoolingMode pooling, AttentionMode mode) {
  using T = typename M::scalar_type;
  TripleReport report;
  const std::size_t max_len = model.config().max_seq_len;
  for (const auto& tr : triples) {
    PoolSpec q, pos, neg;
    try {
      q = build_prefix_spec(vocab, tr.query(), tr.prefix.size(), max_len);
      pos = build_prefix_spec(vocab, tr.positive(), tr.prefix.size(), max_len);
      neg = build_prefix_spec(vocab, tr.negative(), tr.prefix.size(), max_len);
    } catch (const LengthError&) {
      ++report.skipped;
      continue;
    }
    const auto eq = embed_spec(model, q, pooling, mode).vector;
    const auto ep = embed_spec(model, pos, pooling, mode).vector;
    const auto en = embed_spec(model, neg, pooling, mode).vector;
    report.scores.push_back({cosine(std::span<const T>(eq), std::span<const T>(ep)),
                             cosine(std::span<const T>(eq), std::span<const T>(en))});
  }
  if (report.scores.empty()) return report;
  std::size_t correct = 0;
  for (const auto& s : report.scores) {
    report.mean_positive += s.positive;
    report.mean_negative += s.negative;
    correct += s.positive > s.negative;
  }
  const double n = static_cast<double>(report.scores.size());
  report.mean_positive /= n;
  report.mean_negative /= n;
  report.separation = report.mean_positive - report.mean_negative;
  report.fraction_correct = static_cast<double>(correct) / n;
  return report;
}

/// [n_layers + 1, T] cosines between causal and bidirectional hidden states;
/// row 0 is the embedding layer.
struct LayerSimMatrix {
  std::size_t layers = 0;
  std::size_t positions = 0;
  std::vector<double> values;

  double at(std::size_t layer, std::size_t pos) const { return values.at(layer * positions + pos); }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out << "layer";
    for (std::size_t t = 0; t < positions; ++t) out << ",pos" << t;
    out << '\n' << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (std::size_t l = 0; l < layers; ++l) {
      out << l;
      for (std::size_t t = 0; t < positions; ++t) out << ',' << at(l, t);
      out << '\n';
    }
  }
};

template <TransformerWeights M>
LayerSimMatrix layerwise_mask_similarity(const M& model, std::span<const int> ids) {
  using T = typename M::scalar_type;
  ForwardOptions fo;
  fo.compute_logits = false;
  fo.mode = AttentionMode::Causal;
  const auto causal = forward(model, ids, fo);
  fo.mode = AttentionMode::Bidirectional;
  const auto bi = forward(model, ids, fo);
  LayerSimMatrix m;
  m.layers = causal.hidden.size();
  m.positions = ids.size();
  const std::size_t d = model.config().d_model;
  for (std::size_t l = 0; l < m.layers; ++l) {
    const auto a = causal.hidden[l].data();
    const auto b = bi.hidden[l].data();
    for (std::size_t t = 0; t < m.positions; ++t) {
      m.values.push_back(cosine(std::span<const T>(a.subspan(t * d, d)), std::span<const T>(b.subspan(t * d, d))));
    }
  }
  return m;
}

/// BOS + the text's tokens.
template <TransformerWeights M>
LayerSimMatrix layerwise_mask_similarity(const M& model, const Vocab& vocab, std::string_view text) {
  const TokenSequence seq = vocab.encode(text, true, false);
  if (seq.size() > model.config().max_seq_len) {
    throw LengthError("text needs " + std::to_string(seq.size()) + " tokens, budget is " +
                      std::to_string(model.config().max_seq_len));
  }
  return layerwise_mask_similarity(model, std::span<const int>(seq.ids));
}

}  // namespace l2v
