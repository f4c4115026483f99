#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "l2v/data.hpp"
#include "l2v/error.hpp"
#include "l2v/rng.hpp"

namespace l2v::synthetic {

/// Closed word list shared by the generators.
inline const std::vector<std::string>& lexicon() {
  static const std::vector<std::string> words = {
      "red",  "blue", "green", "gold",  "stone", "river", "cloud", "lamp", "fox",  "owl",
      "bell", "seed", "wind",  "salt",  "rope",  "glass", "moss",  "iron", "tide", "ash",
      "pine", "frog", "milk",  "chalk", "drum",  "wool",  "reed",  "clay", "harp", "kite",
      "leaf", "mint"};
  return words;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out.push_back(' ');
    out += words[i];
  }
  return out;
}

namespace detail {

inline std::vector<std::size_t> draw_cycle(CounterRng& rng, std::size_t period, std::size_t n_words) {
  std::vector<std::size_t> cycle;
  while (cycle.size() < period) {
    const std::size_t w = rng.below(n_words);
    bool dup = false;
    for (std::size_t c : cycle) dup |= c == w;
    if (!dup) cycle.push_back(w);
  }
  return cycle;
}

inline std::string render_cycle(const std::vector<std::size_t>& cycle, std::size_t phase, std::size_t len) {
  std::vector<std::string> words;
  for (std::size_t i = 0; i < len; ++i) words.push_back(lexicon()[cycle[(phase + i) % cycle.size()]]);
  return join_words(words);
}

}  // namespace detail

/// Sentences that repeat a short cycle of distinct words (period 2-4,
/// 12-24 words), so any word is determined by the word one period away.
inline std::vector<std::string> periodic_corpus(std::size_t n, std::uint64_t seed, std::size_t n_words = 20) {
  if (n_words < 4 || n_words > lexicon().size()) throw ConfigError("periodic corpus needs 4..32 words");
  CounterRng rng(seed, 0x70657264);
  std::vector<std::string> out;
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t period = 2 + rng.below(3);
    const auto cycle = detail::draw_cycle(rng, period, n_words);
    out.push_back(detail::render_cycle(cycle, 0, 12 + rng.below(13)));
  }
  return out;
}

inline constexpr const char* kNoneLabel = "NONE";

/// Class of a NEXT-TOKEN word: words are split into `n_classes` equal groups.
inline std::string next_token_class(std::size_t word, std::size_t n_classes) {
  return "C" + std::to_string(word % n_classes);
}

/// Sentences of i.i.d. words; each word is labeled with the class of the word
/// that follows it, and the last word with NONE.
inline std::vector<LabeledSentence> next_token_corpus(std::size_t n, std::uint64_t seed, std::size_t n_words = 16,
                                                      std::size_t n_classes = 4, std::size_t min_len = 8,
                                                      std::size_t max_len = 16) {
  const auto& lex = lexicon();
  if (n_words > lex.size() || n_classes == 0 || n_classes > n_words || min_len < 2 || max_len < min_len) {
    throw ConfigError("invalid NEXT-TOKEN corpus settings");
  }
  CounterRng rng(seed, 0x6e657874);
  std::vector<LabeledSentence> out;
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t len = min_len + rng.below(max_len - min_len + 1);
    std::vector<std::size_t> ids(len);
    for (auto& w : ids) w = rng.below(n_words);
    LabeledSentence sent;
    sent.line = s + 1;
    for (std::size_t i = 0; i < len; ++i) {
      sent.tokens.push_back(lex[ids[i]]);
      sent.labels.push_back(i + 1 < len ? next_token_class(ids[i + 1], n_classes) : kNoneLabel);
    }
    out.push_back(std::move(sent));
  }
  return out;
}

/// Prefix triples over the lexicon: A is 3-5 words, B is 4-6 words, C is B
/// with one word replaced, D shares no word with B.
inline std::vector<PrefixTriple> prefix_triples(std::size_t n, std::uint64_t seed, std::size_t n_words = 20) {
  const auto& lex = lexicon();
  if (n_words < 12 || n_words > lex.size()) throw ConfigError("triples need 12..32 words");
  CounterRng rng(seed, 0x74726970);
  auto draw = [&](std::size_t len) {
    std::vector<std::size_t> w(len);
    for (auto& x : w) x = rng.below(n_words);
    return w;
  };
  auto words_of = [&](const std::vector<std::size_t>& ids) {
    std::vector<std::string> out;
    for (std::size_t i : ids) out.push_back(lex[i]);
    return join_words(out);
  };
  std::vector<PrefixTriple> out;
  for (std::size_t t = 0; t < n; ++t) {
    const auto a = draw(3 + rng.below(3));
    const auto b = draw(4 + rng.below(3));
    auto c = b;
    const std::size_t slot = rng.below(c.size());
    do c[slot] = rng.below(n_words);
    while (c[slot] == b[slot]);
    std::vector<std::size_t> d;
    while (d.size() < b.size()) {
      const std::size_t w = rng.below(n_words);
      bool in_b = false;
      for (std::size_t x : b) in_b |= x == w;
      if (!in_b) d.push_back(w);
    }
    out.push_back({words_of(a), words_of(b), words_of(c), words_of(d)});
  }
  return out;
}


inline constexpr const char* kCycleInstruction = "find the same cycle:";

/// Query and positive repeat the same cycle (different phase and length);
/// the hard negative swaps one word of the cycle.
inline std::vector<ContrastiveExample> contrastive_examples(std::size_t n, std::uint64_t seed,
                                                            std::size_t n_words = 20) {
  if (n_words < 5 || n_words > lexicon().size()) throw ConfigError("contrastive examples need 5..32 words");
  CounterRng rng(seed, 0x636f6e74);
  std::vector<ContrastiveExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t period = 2 + rng.below(3);
    const auto cycle = detail::draw_cycle(rng, period, n_words);
    auto other = cycle;
    const std::size_t slot = rng.below(period);
    for (;;) {
      const std::size_t w = rng.below(n_words);
      bool dup = false;
      for (std::size_t c : cycle) dup |= c == w;
      if (!dup) {
        other[slot] = w;
        break;
      }
    }
    ContrastiveExample ex;
    ex.instruction = kCycleInstruction;
    ex.query = detail::render_cycle(cycle, 0, 6 + rng.below(7));
    ex.positive = detail::render_cycle(cycle, rng.below(period), 6 + rng.below(7));
    ex.hard_negatives.push_back(detail::render_cycle(other, rng.below(period), 6 + rng.below(7)));
    out.push_back(std::move(ex));
  }
  return out;
}

/// Pairs of periodic sentences scored by the Jaccard overlap of their
/// cycles, scaled to [0, 5].
inline std::vector<ScoredPair> sts_pairs(std::size_t n, std::uint64_t seed, std::size_t n_words = 20) {
  if (n_words < 8 || n_words > lexicon().size()) throw ConfigError("sts pairs need 8..32 words");
  CounterRng rng(seed, 0x73747370);
  std::vector<ScoredPair> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = detail::draw_cycle(rng, 2 + rng.below(3), n_words);
    auto b = a;
    const std::size_t swaps = rng.below(a.size() + 1);
    for (std::size_t s = 0; s < swaps; ++s) {
      for (;;) {
        const std::size_t w = rng.below(n_words);
        bool dup = false;
        for (std::size_t c : b) dup |= c == w;
        if (!dup) {
          b[s] = w;
          break;
        }
      }
    }
    std::size_t shared = 0;
    for (std::size_t x : a)
      for (std::size_t y : b) shared += x == y;
    const double jaccard = static_cast<double>(shared) / static_cast<double>(a.size() + b.size() - shared);
    out.push_back({detail::render_cycle(a, 0, 8 + rng.below(5)), detail::render_cycle(b, rng.below(b.size()), 8 + rng.below(5)),
                   5.0 * jaccard});
  }
  return out;
}

}  // namespace l2v::synthetic
