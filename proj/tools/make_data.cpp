// Regenerates the synthetic corpora under data/ (except the hand-written demo triples).

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>

#include "l2v/synthetic.hpp"

namespace fs = std::filesystem;
using namespace l2v;

namespace {

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw Error("cannot write " + p.string());
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path dir = argc > 1 ? fs::path(argv[1]) : fs::path("data");
  try {
    fs::create_directories(dir);
    {
      auto out = open_out(dir / "toy_corpus.txt");
      for (const auto& s : synthetic::periodic_corpus(2000, 1)) out << s << '\n';
    }
    {
      auto out = open_out(dir / "simcse_corpus.txt");
      for (const auto& s : synthetic::periodic_corpus(256, 42)) out << s << '\n';
    }
    {
      auto out = open_out(dir / "next_token.tsv");
      bool first = true;
      for (const auto& s : synthetic::next_token_corpus(600, 11)) {
        if (!first) out << '\n';
        first = false;
        for (std::size_t i = 0; i < s.tokens.size(); ++i) out << s.tokens[i] << '\t' << s.labels[i] << '\n';
      }
    }
    {
      auto out = open_out(dir / "triples.tsv");
      for (const auto& t : synthetic::prefix_triples(100, 5))
        out << t.prefix << '\t' << t.query_suffix << '\t' << t.positive_suffix << '\t' << t.negative_suffix << '\n';
    }
    {
      auto out = open_out(dir / "supervised.tsv");
      for (const auto& ex : synthetic::contrastive_examples(512, 7)) {
        out << ex.instruction << '\t' << ex.query << '\t' << ex.positive;
        for (const auto& n : ex.hard_negatives) out << '\t' << n;
        out << '\n';
      }
    }
    {
      auto out = open_out(dir / "sts.tsv");
      out << std::setprecision(6);
      for (const auto& p : synthetic::sts_pairs(200, 3)) out << p.first << '\t' << p.second << '\t' << p.score << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "make_data: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
