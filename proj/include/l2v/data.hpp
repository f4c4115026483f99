#pragma once

// Corpus formats:
//   sentences    UTF-8, one sentence per line (blank lines ignored)
//   token-label  `token<TAB>label` per line, blank line between sentences
//   triples      TSV: prefix, query suffix, positive suffix, negative suffix
//   contrastive  TSV: instruction, query, positive, [hard negative...]
//   sts pairs    TSV: sentence1, sentence2, gold score

#include <cstddef>
#include <fstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "l2v/error.hpp"

namespace l2v {

struct LabeledSentence {
  std::vector<std::string> tokens;
  std::vector<std::string> labels;
  std::size_t line = 0;  // first line of the sentence in its file

  /// Tokens joined by single spaces.
  std::string text() const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) out.push_back(' ');
      out += tokens[i];
    }
    return out;
  }
};

struct PrefixTriple {
  std::string prefix;           // A
  std::string query_suffix;     // B
  std::string positive_suffix;  // C
  std::string negative_suffix;  // D

  std::string query() const { return join(query_suffix); }
  std::string positive() const { return join(positive_suffix); }
  std::string negative() const { return join(negative_suffix); }

 private:
  std::string join(const std::string& suffix) const {
    return suffix.empty() ? prefix : prefix + " " + suffix;
  }
};

struct ContrastiveExample {
  std::string instruction;
  std::string query;
  std::string positive;
  std::vector<std::string> hard_negatives;
};

struct ScoredPair {
  std::string first;
  std::string second;
  double score = 0.0;
};

/// True when `s` is well-formed UTF-8 (no overlongs, surrogates or values
/// above U+10FFFF).
inline bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > s.size()) return false;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000)) return false;
    if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += len;
  }
  return true;
}

namespace detail {

/// Calls fn(line, lineno) for every line of `path` with '\r' stripped.
template <class Fn>
void for_each_line(const std::string& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!valid_utf8(line)) throw ParseError(path, lineno, "invalid UTF-8");
    fn(line, lineno);
  }
}

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

}  // namespace detail

inline std::vector<std::string> load_sentences(const std::string& path) {
  std::vector<std::string> out;
  detail::for_each_line(path, [&](const std::string& line, std::size_t) {
    if (!line.empty()) out.push_back(line);
  });
  return out;
}

inline std::vector<LabeledSentence> load_token_labels(const std::string& path) {
  std::vector<LabeledSentence> out;
  LabeledSentence current;
  detail::for_each_line(path, [&](const std::string& line, std::size_t lineno) {
    if (line.empty()) {
      if (!current.tokens.empty()) out.push_back(std::move(current));
      current = LabeledSentence{};
      return;
    }
    const auto fields = detail::split_tabs(line);
    if (fields.size() != 2) {
      throw ParseError(path, lineno, "expected token<TAB>label, got " + std::to_string(fields.size()) + " fields");
    }
    if (fields[0].empty() || fields[1].empty()) throw ParseError(path, lineno, "empty token or label");
    if (fields[0].find(' ') != std::string::npos) throw ParseError(path, lineno, "token contains a space");
    if (current.tokens.empty()) current.line = lineno;
    current.tokens.push_back(fields[0]);
    current.labels.push_back(fields[1]);
  });
  if (!current.tokens.empty()) out.push_back(std::move(current));
  return out;
}

inline std::vector<PrefixTriple> load_triples(const std::string& path) {
  std::vector<PrefixTriple> out;
  detail::for_each_line(path, [&](const std::string& line, std::size_t lineno) {
    if (line.empty()) return;
    auto f = detail::split_tabs(line);
    if (f.size() != 4) throw ParseError(path, lineno, "expected 4 tab-separated columns, got " + std::to_string(f.size()));
    if (f[0].empty()) throw ParseError(path, lineno, "empty prefix");
    out.push_back(PrefixTriple{std::move(f[0]), std::move(f[1]), std::move(f[2]), std::move(f[3])});
  });
  return out;
}

inline std::vector<ContrastiveExample> load_contrastive(const std::string& path) {
  std::vector<ContrastiveExample> out;
  detail::for_each_line(path, [&](const std::string& line, std::size_t lineno) {
    if (line.empty()) return;
    auto f = detail::split_tabs(line);
    if (f.size() < 3) throw ParseError(path, lineno, "expected at least 3 tab-separated columns");
    if (f[1].empty() || f[2].empty()) throw ParseError(path, lineno, "empty query or positive");
    ContrastiveExample ex{std::move(f[0]), std::move(f[1]), std::move(f[2]), {}};
    for (std::size_t i = 3; i < f.size(); ++i) {
      if (f[i].empty()) throw ParseError(path, lineno, "empty hard negative");
      ex.hard_negatives.push_back(std::move(f[i]));
    }
    out.push_back(std::move(ex));
  });
  return out;
}

inline std::vector<ScoredPair> load_scored_pairs(const std::string& path) {
  std::vector<ScoredPair> out;
  detail::for_each_line(path, [&](const std::string& line, std::size_t lineno) {
    if (line.empty()) return;
    auto f = detail::split_tabs(line);
    if (f.size() != 3) throw ParseError(path, lineno, "expected sentence1<TAB>sentence2<TAB>score");
    if (f[0].empty() || f[1].empty()) throw ParseError(path, lineno, "empty sentence");
    double score = 0.0;
    try {
      std::size_t used = 0;
      score = std::stod(f[2], &used);
      if (used != f[2].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ParseError(path, lineno, "score is not a number");
    }
    out.push_back(ScoredPair{std::move(f[0]), std::move(f[1]), score});
  });
  return out;
}

/// Whole-file read, used for BPE training.
inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace l2v
