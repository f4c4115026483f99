#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "l2v/error.hpp"
#include "l2v/rng.hpp"

namespace l2v {

inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kMask = 2;
inline constexpr int kPad = 3;
inline constexpr int kNumSpecial = 4;
inline constexpr int kByteBase = kNumSpecial;         // id of byte 0x00
inline constexpr int kBaseVocab = kNumSpecial + 256;  // specials + bytes
inline constexpr int kDefaultVocabSize = 2048;

struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool operator==(const TokenSpan&) const = default;
};

/// Token ids plus the byte range each token covers in the source text.
/// Special tokens carry an empty span at their insertion point.
struct TokenSequence {
  std::vector<int> ids;
  std::vector<TokenSpan> spans;

  std::size_t size() const noexcept { return ids.size(); }
};

namespace detail {

inline bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

/// Splits text into chunks that BPE never merges across: a word with at most
/// one leading space, or a run of other whitespace. Returns [begin, end)
/// byte ranges.
inline std::vector<std::pair<std::size_t, std::size_t>> pretokenize(std::string_view text) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const std::size_t n = text.size();
  auto ws = [&](std::size_t i) { return is_space(static_cast<unsigned char>(text[i])); };
  auto space_then_word = [&](std::size_t i) { return text[i] == ' ' && i + 1 < n && !ws(i + 1); };
  std::size_t i = 0;
  while (i < n) {
    const std::size_t start = i;
    if (space_then_word(i) || !ws(i)) {
      if (ws(i)) ++i;
      while (i < n && !ws(i)) ++i;
    } else {
      while (i < n && ws(i) && !space_then_word(i)) ++i;
    }
    out.emplace_back(start, i);
  }
  return out;
}

inline std::string escape_token(std::string_view bytes) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned char c : bytes) {
    if (c > 0x20 && c < 0x7f && c != '\\') {
      out.push_back(static_cast<char>(c));
    } else {
      out += "\\x";
      out.push_back(kHex[c >> 4]);
      out.push_back(kHex[c & 15]);
    }
  }
  return out;
}

inline std::string unescape_token(std::string_view s, std::size_t line) {
  auto hex = [&](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw ParseError("vocab", line, "bad hex escape");
  };
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out.push_back(s[i]);
      continue;
    }
    if (i + 3 >= s.size()) throw ParseError("vocab", line, "truncated escape");
    if (s[i + 1] != 'x') throw ParseError("vocab", line, "unknown escape");
    out.push_back(static_cast<char>(hex(s[i + 2]) * 16 + hex(s[i + 3])));
    i += 3;
  }
  return out;
}

}  // namespace detail

class Vocab;

namespace detail {
inline Vocab train_bpe_impl(std::string_view corpus, std::size_t vocab_size, std::uint64_t seed, bool strict);
}  // namespace detail

/// Byte-level BPE vocabulary. Ids: 0..3 specials, 4..259 raw bytes, then one
/// id per merge in training order. Immutable once built.
class Vocab {
 public:
  /// Pure byte tokenizer (no merges).
  Vocab() { rebuild({}); }

  explicit Vocab(std::vector<std::pair<int, int>> merges) { rebuild(std::move(merges)); }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::pair<int, int>>& merges() const noexcept { return merges_; }
  static bool is_special(int id) noexcept { return id >= 0 && id < kNumSpecial; }

  static std::string_view special_name(int id) {
    static constexpr std::string_view kNames[] = {"BOS", "EOS", "MASK", "PAD"};
    return kNames[id];
  }

  /// Bytes of a non-special token.
  const std::string& token_bytes(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw VocabError("id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  /// Id of a byte string that is a token, or -1.
  int find(std::string_view bytes) const {
    auto it = token_to_id_.find(std::string(bytes));
    return it == token_to_id_.end() ? -1 : it->second;
  }

  TokenSequence encode(std::string_view text, bool add_bos = false, bool add_eos = false) const {
    TokenSequence seq;
    if (add_bos) {
      seq.ids.push_back(kBos);
      seq.spans.push_back({0, 0});
    }
    std::vector<int> ids;
    std::vector<TokenSpan> spans;
    for (const auto& [begin, end] : detail::pretokenize(text)) {
      encode_chunk(text, begin, end, ids, spans);
      seq.ids.insert(seq.ids.end(), ids.begin(), ids.end());
      seq.spans.insert(seq.spans.end(), spans.begin(), spans.end());
    }
    if (add_eos) {
      seq.ids.push_back(kEos);
      seq.spans.push_back({text.size(), text.size()});
    }
    return seq;
  }

  /// Concatenated bytes of all non-special ids.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (is_special(id)) continue;
      out += token_bytes(id);
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write vocab file " + path);
    out << "L2V-BPE v1\n" << size() << "\n";
    for (const auto& [a, b] : merges_) {
      out << detail::escape_token(tokens_[a]) << ' ' << detail::escape_token(tokens_[b]) << '\n';
    }
    out << "specials " << kNumSpecial << '\n';
    for (int id = 0; id < kNumSpecial; ++id) out << special_name(id) << ' ' << id << '\n';
    if (!out) throw Error("failed writing vocab file " + path);
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open vocab file " + path);
    std::string line;
    std::size_t lineno = 0;
    auto next = [&]() -> std::string& {
      if (!std::getline(in, line)) throw ParseError(path, lineno + 1, "unexpected end of file");
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      return line;
    };
    if (next() != "L2V-BPE v1") throw ParseError(path, lineno, "missing 'L2V-BPE v1' header");
    std::size_t vocab_size = 0;
    try {
      vocab_size = std::stoul(next());
    } catch (const std::exception&) {
      throw ParseError(path, lineno, "vocab size is not a number");
    }
    if (vocab_size < static_cast<std::size_t>(kBaseVocab)) {
      throw ParseError(path, lineno, "vocab size below " + std::to_string(kBaseVocab));
    }
    Vocab partial;
    for (std::size_t k = 0; k < vocab_size - kBaseVocab; ++k) {
      const std::string& l = next();
      const auto sp = l.find(' ');
      if (sp == std::string::npos || l.find(' ', sp + 1) != std::string::npos) {
        throw ParseError(path, lineno, "merge line must hold two space-separated tokens");
      }
      const std::string a = detail::unescape_token(std::string_view(l).substr(0, sp), lineno);
      const std::string b = detail::unescape_token(std::string_view(l).substr(sp + 1), lineno);
      const int ia = partial.find(a), ib = partial.find(b);
      if (ia < 0 || ib < 0) throw ParseError(path, lineno, "merge references an unknown token");
      partial.add_merge(ia, ib);
    }
    if (next() != "specials " + std::to_string(kNumSpecial)) {
      throw ParseError(path, lineno, "expected special-token table");
    }
    for (int id = 0; id < kNumSpecial; ++id) {
      if (next() != std::string(special_name(id)) + " " + std::to_string(id)) {
        throw ParseError(path, lineno, "special-token table mismatch");
      }
    }
    return partial;
  }

  bool operator==(const Vocab& other) const { return merges_ == other.merges_; }

 private:
  friend Vocab detail::train_bpe_impl(std::string_view corpus, std::size_t vocab_size, std::uint64_t seed,
                                      bool strict);

  void rebuild(std::vector<std::pair<int, int>> merges) {
    tokens_.clear();
    token_to_id_.clear();
    rank_.clear();
    merges_.clear();
    for (int id = 0; id < kNumSpecial; ++id) tokens_.emplace_back();
    for (int b = 0; b < 256; ++b) {
      tokens_.emplace_back(1, static_cast<char>(b));
      token_to_id_.emplace(tokens_.back(), kByteBase + b);
    }
    for (const auto& [a, b] : merges) add_merge(a, b);
  }

  void add_merge(int a, int b) {
    const int n = static_cast<int>(tokens_.size());
    if (a < kNumSpecial || b < kNumSpecial || a >= n || b >= n) {
      throw VocabError("merge references an invalid id");
    }
    std::string joined = tokens_[a] + tokens_[b];
    if (token_to_id_.count(joined)) throw VocabError("merge duplicates an existing token");
    rank_.emplace(pair_key(a, b), static_cast<int>(merges_.size()));
    merges_.emplace_back(a, b);
    token_to_id_.emplace(joined, n);
    tokens_.push_back(std::move(joined));
  }

  static std::uint64_t pair_key(int a, int b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

  // Repeatedly merges the adjacent pair of lowest merge rank.
  void encode_chunk(std::string_view text, std::size_t begin, std::size_t end,
                    std::vector<int>& ids, std::vector<TokenSpan>& spans) const {
    ids.clear();
    spans.clear();
    for (std::size_t i = begin; i < end; ++i) {
      ids.push_back(kByteBase + static_cast<unsigned char>(text[i]));
      spans.push_back({i, i + 1});
    }
    while (ids.size() > 1) {
      int best_rank = -1;
      for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
        auto it = rank_.find(pair_key(ids[i], ids[i + 1]));
        if (it != rank_.end() && (best_rank < 0 || it->second < best_rank)) best_rank = it->second;
      }
      if (best_rank < 0) break;
      const auto [a, b] = merges_[static_cast<std::size_t>(best_rank)];
      const int merged = kBaseVocab + best_rank;
      std::size_t w = 0;
      for (std::size_t r = 0; r < ids.size(); ++r) {
        if (r + 1 < ids.size() && ids[r] == a && ids[r + 1] == b) {
          ids[w] = merged;
          spans[w] = {spans[r].begin, spans[r + 1].end};
          ++r;
        } else {
          ids[w] = ids[r];
          spans[w] = spans[r];
        }
        ++w;
      }
      ids.resize(w);
      spans.resize(w);
    }
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> token_to_id_;
  std::unordered_map<std::uint64_t, int> rank_;
  std::vector<std::pair<int, int>> merges_;
};

namespace detail {

inline Vocab train_bpe_impl(std::string_view corpus, std::size_t vocab_size, std::uint64_t seed, bool strict) {
  if (vocab_size < static_cast<std::size_t>(kBaseVocab)) {
    throw ConfigError("vocab_size must be at least " + std::to_string(kBaseVocab));
  }
  if (corpus.empty()) throw EmptyInputError("empty corpus");

  std::map<std::string, std::size_t> chunk_counts;
  for (const auto& [b, e] : detail::pretokenize(corpus)) ++chunk_counts[std::string(corpus.substr(b, e - b))];

  std::vector<std::vector<int>> words;
  std::vector<std::size_t> freq;
  for (const auto& [chunk, count] : chunk_counts) {
    std::vector<int> ids;
    for (unsigned char c : chunk) ids.push_back(kByteBase + c);
    words.push_back(std::move(ids));
    freq.push_back(count);
  }

  Vocab vocab;
  const std::size_t target = vocab_size - kBaseVocab;
  while (vocab.merges().size() < target) {
    std::map<std::pair<int, int>, std::size_t> counts;
    for (std::size_t w = 0; w < words.size(); ++w) {
      const auto& ids = words[w];
      for (std::size_t i = 0; i + 1 < ids.size(); ++i) counts[{ids[i], ids[i + 1]}] += freq[w];
    }
    std::pair<int, int> best{-1, -1};
    std::size_t best_count = 0;
    std::uint64_t best_tie = 0;
    for (const auto& [pair, count] : counts) {
      if (vocab.find(vocab.token_bytes(pair.first) + vocab.token_bytes(pair.second)) >= 0) continue;
      const std::uint64_t tie = splitmix64(seed ^ Vocab::pair_key(pair.first, pair.second));
      if (count > best_count || (count == best_count && tie < best_tie)) {
        best = pair;
        best_count = count;
        best_tie = tie;
      }
    }
    if (best_count == 0) {
      if (!strict) break;
      throw VocabError("corpus supports only " + std::to_string(vocab.size()) +
                       " tokens, requested " + std::to_string(vocab_size));
    }
    const int merged = static_cast<int>(vocab.size());
    vocab.add_merge(best.first, best.second);
    for (auto& ids : words) {
      std::size_t w = 0;
      for (std::size_t r = 0; r < ids.size(); ++r) {
        if (r + 1 < ids.size() && ids[r] == best.first && ids[r + 1] == best.second) {
          ids[w++] = merged;
          ++r;
        } else {
          ids[w++] = ids[r];
        }
      }
      ids.resize(w);
    }
  }
  return vocab;
}

}  // namespace detail

/// Learns vocab_size - 260 merges from `corpus`. At each step the most
/// frequent adjacent pair (counted within pretokenized chunks) is merged;
/// ties are broken by a seed-keyed hash of the pair. Pairs whose joined bytes
/// already form a token are skipped. Throws VocabError when the corpus runs
/// out of pairs first.
inline Vocab train_bpe(std::string_view corpus, std::size_t vocab_size = kDefaultVocabSize,
                       std::uint64_t seed = 0) {
  return detail::train_bpe_impl(corpus, vocab_size, seed, true);
}

/// As train_bpe, but stops early instead of throwing when pairs run out.
inline Vocab train_bpe_up_to(std::string_view corpus, std::size_t max_vocab_size = kDefaultVocabSize,
                             std::uint64_t seed = 0) {
  return detail::train_bpe_impl(corpus, max_vocab_size, seed, false);
}

}  // namespace l2v
