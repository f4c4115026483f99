#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "l2v/data.hpp"
#include "l2v/error.hpp"
#include "l2v/ops.hpp"
#include "l2v/optim.hpp"
#include "l2v/pooling.hpp"
#include "l2v/rng.hpp"
#include "l2v/tensor.hpp"
#include "l2v/tokenizer.hpp"
#include "l2v/training.hpp"
#include "l2v/transformer.hpp"

namespace l2v {

/// Token positions [first, last] (inclusive) that make up one word.
struct WordSpan {
  std::size_t word = 0;
  std::size_t first = 0;
  std::size_t last = 0;
  bool operator==(const WordSpan&) const = default;
};

struct TokenizedSentence {
  std::vector<int> ids;  // BOS + tokens
  std::vector<WordSpan> words;
};

/// Encodes the words joined by single spaces, prefixed with BOS, and assigns
/// every token to the word its bytes overlap. A word owns the space before it.
inline TokenizedSentence tokenize_words(const Vocab& vocab, const std::vector<std::string>& words) {
  if (words.empty()) throw EmptyInputError("sentence has no words");
  std::string text;
  std::vector<std::pair<std::size_t, std::size_t>> chars;
  for (const auto& w : words) {
    if (w.empty()) throw DataError("empty word");
    const std::size_t begin = text.size();  // the separating space belongs to this word
    if (!text.empty()) text.push_back(' ');
    chars.emplace_back(begin, text.size() + w.size());
    text += w;
  }
  const TokenSequence seq = vocab.encode(text, true, false);
  TokenizedSentence out;
  out.ids = seq.ids;
  std::size_t w = 0;
  for (std::size_t t = 1; t < seq.size(); ++t) {
    const auto& sp = seq.spans[t];
    while (w < chars.size() && sp.begin >= chars[w].second) ++w;
    if (w == chars.size() || sp.end <= chars[w].first) throw DataError("token does not overlap a word");
    if (out.words.empty() || out.words.back().word != w) {
      out.words.push_back({w, t, t});
    } else {
      out.words.back().last = t;
    }
  }
  if (out.words.size() != words.size()) throw DataError("some word received no tokens");
  return out;
}

/// Unshifted: mean of rows [first, last]. Shifted: mean of rows
/// [first - 1, last - 1], i.e. the previous position carries the word.
template <class T>
Tensor<T> word_representations(const Tensor<T>& hidden, const std::vector<WordSpan>& spans, bool shifted) {
  detail::require_rank2(hidden.shape(), "word_representations");
  const std::size_t n = hidden.dim(0), d = hidden.dim(1);
  if (spans.empty()) throw EmptyInputError("no word spans");
  std::vector<T> out(spans.size() * d, T(0));
  for (std::size_t w = 0; w < spans.size(); ++w) {
    const auto& s = spans[w];
    if (s.first > s.last || s.last >= n) throw IndexError("word span outside the sequence");
    if (shifted && s.first == 0) throw IndexError("shifted span needs a predecessor row");
    const std::size_t lo = shifted ? s.first - 1 : s.first;
    const std::size_t hi = shifted ? s.last - 1 : s.last;
    const double inv = 1.0 / static_cast<double>(hi - lo + 1);
    for (std::size_t c = 0; c < d; ++c) {
      double acc = 0.0;
      for (std::size_t r = lo; r <= hi; ++r) acc += static_cast<double>(hidden[r * d + c]);
      out[w * d + c] = static_cast<T>(acc * inv);
    }
  }
  return Tensor<T>({spans.size(), d}, std::move(out));
}

struct ProbeConfig {
  double dropout = 0.1;
  std::size_t steps = 1500;
  double lr = 5e-4;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;

  void validate() const {
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("probe dropout must lie in [0, 1)");
    if (steps == 0 || batch_size == 0) throw ConfigError("probe steps and batch size must be positive");
    if (!(lr > 0.0)) throw ConfigError("probe learning rate must be positive");
  }
};

struct Probe {
  Tensor<double> weight;  // [n_classes, d]
  Tensor<double> bias;    // [n_classes]

  std::size_t n_classes() const { return weight.dim(0); }

  std::vector<std::size_t> predict(const Tensor<double>& reps) const {
    const Tensor<double> logits = add_row(matmul_nt(reps, weight), bias);
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = logits.data().subspan(i * c, c);
      out[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
  }
};

struct ProbeTraining {
  Probe probe;
  std::vector<double> losses;
  std::vector<std::size_t> absent_classes;  // classes with no training example
};

/// Softmax regression with input dropout, trained by Adam from zero weights.
inline ProbeTraining train_probe(const Tensor<double>& reps, const std::vector<std::size_t>& labels,
                                 std::size_t n_classes, const ProbeConfig& cfg) {
  cfg.validate();
  detail::require_rank2(reps.shape(), "train_probe");
  const std::size_t n = reps.dim(0), d = reps.dim(1);
  if (labels.size() != n) throw ShapeError("probe labels and representations differ in count");
  if (n_classes == 0) throw ConfigError("probe needs at least one class");
  std::vector<bool> seen(n_classes, false);
  for (std::size_t y : labels) {
    if (y >= n_classes) throw IndexError("probe label outside [0, n_classes)");
    seen[y] = true;
  }
  ProbeTraining out;
  for (std::size_t c = 0; c < n_classes; ++c)
    if (!seen[c]) out.absent_classes.push_back(c);

  out.probe.weight = Tensor<double>::zeros({n_classes, d}, true);
  out.probe.bias = Tensor<double>::zeros({n_classes}, true);
  BatchSampler sampler(n, cfg.batch_size, CounterRng(cfg.seed, kSamplerStream));
  CounterRng drop_rng(cfg.seed, kDropoutStream);
  Adam<double> opt({out.probe.weight, out.probe.bias});
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const std::vector<std::size_t> idx = sampler.next();
    std::vector<std::size_t> y;
    for (std::size_t i : idx) y.push_back(labels[i]);
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    opt.zero_grad();
    const Tensor<double> x = dropout(gather_rows(reps, std::span<const std::size_t>(idx)), cfg.dropout, drop_rng);
    const Tensor<double> loss =
        cross_entropy(add_row(matmul_nt(x, out.probe.weight), out.probe.bias), std::span<const std::size_t>(y));
    out.losses.push_back(loss.item());
    tape.backward(loss);
    opt.step(cfg.lr);
  }
  out.probe.weight.set_requires_grad(false);
  out.probe.bias.set_requires_grad(false);
  return out;
}

inline double accuracy(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& gold) {
  if (pred.size() != gold.size() || pred.empty()) throw ShapeError("accuracy needs equal, nonempty inputs");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == gold[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

struct ProbeReport {
  std::string task;
  AttentionMode mode = AttentionMode::Causal;
  bool shifted = false;
  double accuracy = 0.0;
  std::size_t n_test = 0;
  std::size_t n_train = 0;
  std::uint64_t seed = 0;
  double majority_baseline = 0.0;  // accuracy of always predicting the top training label
  std::size_t unseen_test_words = 0;
  std::vector<std::string> labels;

  nlohmann::json to_json() const {
    return {{"task", task},         {"mode", std::string(to_string(mode))},
            {"shifted", shifted},   {"accuracy", accuracy},
            {"n_test", n_test},     {"seed", seed},
            {"n_train", n_train},   {"majority_baseline", majority_baseline},
            {"unseen_test_words", unseen_test_words}};
  }
};

/// Deterministic 80/20 sentence split: returns (train, test) indices.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_sentences(std::size_t n,
                                                                                     std::uint64_t seed) {
  if (n < 2) throw DataError("probe corpus needs at least 2 sentences");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng rng(seed, 0x73706c74);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const std::size_t n_test = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(0.2 * n)), 1, n - 1);
  std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {train, test};
}

/// Frozen-model word representations of every word in the given sentences.
template <TransformerWeights M>
Tensor<double> sentence_word_features(const M& model, const Vocab& vocab, const std::vector<LabeledSentence>& corpus,
                                      const std::vector<std::size_t>& which, AttentionMode mode, bool shifted) {
  std::vector<Tensor<double>> parts;
  for (std::size_t s : which) {
    const TokenizedSentence tok = tokenize_words(vocab, corpus[s].tokens);
    ForwardOptions fo;
    fo.mode = mode;
    fo.compute_logits = false;
    const auto trace = forward(model, tok.ids, fo);
    parts.push_back(word_representations(trace.output(), tok.words, shifted).template cast<double>());
  }
  return concat_rows(parts);
}

/// Trains a probe on 80% of the sentences and reports accuracy on the rest.
/// Test words whose label never occurs in training count as wrong.
template <TransformerWeights M>
ProbeReport probe_task(const M& model, const Vocab& vocab, const std::vector<LabeledSentence>& corpus,
                       AttentionMode mode, bool shifted, const ProbeConfig& cfg, std::string task = "probe") {
  const auto [train, test] = split_sentences(corpus.size(), cfg.seed);
  ProbeReport report;
  report.task = std::move(task);
  report.mode = mode;
  report.shifted = shifted;
  report.seed = cfg.seed;

  std::map<std::string, std::size_t> counts;
  for (std::size_t s : train)
    for (const auto& l : corpus[s].labels) ++counts[l];
  std::map<std::string, std::size_t> label_id;
  for (const auto& [l, c] : counts) {
    label_id.emplace(l, report.labels.size());
    report.labels.push_back(l);
  }
  std::vector<std::size_t> y_train;
  for (std::size_t s : train)
    for (const auto& l : corpus[s].labels) y_train.push_back(label_id.at(l));

  const std::size_t unseen = label_id.size();  // never predicted
  std::vector<std::size_t> y_test;
  for (std::size_t s : test)
    for (const auto& l : corpus[s].labels) {
      auto it = label_id.find(l);
      y_test.push_back(it == label_id.end() ? unseen : it->second);
      if (it == label_id.end()) ++report.unseen_test_words;
    }

  const Tensor<double> x_train = sentence_word_features(model, vocab, corpus, train, mode, shifted);
  const Tensor<double> x_test = sentence_word_features(model, vocab, corpus, test, mode, shifted);
  const ProbeTraining trained = train_probe(x_train, y_train, label_id.size(), cfg);

  report.n_train = y_train.size();
  report.n_test = y_test.size();
  report.accuracy = accuracy(trained.probe.predict(x_test), y_test);

  std::size_t majority = 0;
  for (const auto& [l, c] : counts)
    if (c > counts.at(report.labels[majority])) majority = label_id.at(l);
  report.majority_baseline = accuracy(std::vector<std::size_t>(y_test.size(), majority), y_test);
  return report;
}

// ---------------------------------------------------------------------------
// Rank correlation

/// 1-based ranks; tied values share the average of their positions.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Pearson correlation of the average ranks.
inline double spearman(std::span<const double> pred, std::span<const double> gold) {
  if (pred.size() != gold.size()) throw ShapeError("spearman inputs differ in length");
  if (pred.size() < 2) throw EmptyInputError("spearman needs at least two pairs");
  for (double x : pred)
    if (!std::isfinite(x)) throw NumericFault("spearman: non-finite prediction");
  for (double x : gold)
    if (!std::isfinite(x)) throw NumericFault("spearman: non-finite gold score");
  const std::vector<double> a = average_ranks(pred), b = average_ranks(gold);
  const double mean = 0.5 * static_cast<double>(a.size() + 1);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - mean) * (b[i] - mean);
    saa += (a[i] - mean) * (a[i] - mean);
    sbb += (b[i] - mean) * (b[i] - mean);
  }
  if (saa == 0.0 || sbb == 0.0) throw UndefinedCorrelationError("spearman: constant input has no ranking");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline double spearman(const std::vector<double>& pred, const std::vector<double>& gold) {
  return spearman(std::span<const double>(pred), std::span<const double>(gold));
}

struct StsReport {
  double spearman = 0.0;
  std::size_t n_pairs = 0;
  std::vector<double> predicted;
};

/// Cosine of the two sides' embeddings against gold scores.
template <TransformerWeights M>
StsReport sts_eval(const M& model, const Vocab& vocab, const std::vector<ScoredPair>& pairs, PoolingMode pooling,
                   AttentionMode mode, const std::string& instruction = "") {
  StsReport out;
  std::vector<double> gold;
  for (const auto& p : pairs) {
    const auto a = embed(model, EmbeddingRequest{instruction, p.first, pooling, mode}, vocab);
    const auto b = embed(model, EmbeddingRequest{instruction, p.second, pooling, mode}, vocab);
    out.predicted.push_back(cosine(std::span<const typename M::scalar_type>(a.vector),
                                   std::span<const typename M::scalar_type>(b.vector)));
    gold.push_back(p.score);
  }
  out.n_pairs = pairs.size();
  out.spearman = spearman(out.predicted, gold);
  return out;
}

}  // namespace l2v
