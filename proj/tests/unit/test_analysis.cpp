#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "l2v/analysis.hpp"
#include "test_util.hpp"

using namespace l2v;
using l2v::test::scaled_model;

namespace {

Model<double> byte_model(std::uint64_t seed, std::size_t layers = 2) {
  auto c = l2v::test::tiny_config(kBaseVocab, layers, 16);
  c.max_seq_len = 48;
  return scaled_model<double>(c, seed);
}

const std::vector<PrefixTriple> kTriples{{"red fox", "runs far", "runs fast", "sleeps in"},
                                         {"blue owl", "sings low", "sings loud", "eats fish"}};

}  // namespace

TEST(PrefixSpec, IncludesOnlyPrefixTokens) {
  const Vocab v;
  const auto s = build_prefix_spec(v, "ab cd", 2, 16);
  EXPECT_EQ(s.ids.size(), 7u);  // BOS a b ' ' c d EOS
  EXPECT_EQ(s.include, (std::vector<bool>{false, true, true, false, false, false, false}));
  EXPECT_THROW((void)build_prefix_spec(v, "ab cd", 2, 6), LengthError);
}

TEST(Triples, CausalPrefixIsBlindToSuffix) {
  const auto m = byte_model(1);
  const Vocab v;
  for (PoolingMode p : {PoolingMode::Mean, PoolingMode::WeightedMean, PoolingMode::Eos}) {
    const auto r = prefix_triple_similarity(m, v, kTriples, p, AttentionMode::Causal);
    ASSERT_EQ(r.scores.size(), 2u);
    for (const auto& s : r.scores) {
      EXPECT_NEAR(s.positive, 1.0, 1e-12);
      EXPECT_NEAR(s.negative, 1.0, 1e-12);
    }
    EXPECT_NEAR(r.separation, 0.0, 1e-12);
  }
}

TEST(Triples, BidirectionalSeesSuffix) {
  const auto m = byte_model(2);
  const Vocab v;
  const auto r = prefix_triple_similarity(m, v, kTriples, PoolingMode::Mean, AttentionMode::Bidirectional);
  for (const auto& s : r.scores) {
    EXPECT_LT(s.positive, 1.0 - 1e-9);
    EXPECT_LT(s.negative, 1.0 - 1e-9);
  }
  double mp = 0, mn = 0;
  std::size_t correct = 0;
  for (const auto& s : r.scores) {
    mp += s.positive / 2;
    mn += s.negative / 2;
    correct += s.positive > s.negative;
  }
  EXPECT_DOUBLE_EQ(r.mean_positive, mp);
  EXPECT_DOUBLE_EQ(r.separation, mp - mn);
  EXPECT_DOUBLE_EQ(r.fraction_correct, correct / 2.0);
}

TEST(Triples, DegenerateTriples) {
  const auto m = byte_model(3);
  const Vocab v;
  // C == D: both similarities agree exactly
  const auto same = prefix_triple_similarity(m, v, {{"red fox", "runs far", "hides", "hides"}}, PoolingMode::Mean,
                                             AttentionMode::Bidirectional);
  EXPECT_EQ(same.scores[0].positive, same.scores[0].negative);
  EXPECT_EQ(same.fraction_correct, 0.0);
  // B == C: the positive is the query itself
  const auto ident = prefix_triple_similarity(m, v, {{"red fox", "runs far", "runs far", "hides"}},
                                              PoolingMode::Mean, AttentionMode::Bidirectional);
  EXPECT_NEAR(ident.scores[0].positive, 1.0, 1e-12);
  EXPECT_EQ(ident.fraction_correct, 1.0);
}

TEST(Triples, OverlongSkipped) {
  const auto m = byte_model(4);
  const Vocab v;
  const auto r = prefix_triple_similarity(m, v, {{"a", std::string(60, 'x'), "y", "z"}}, PoolingMode::Mean,
                                          AttentionMode::Causal);
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_TRUE(r.scores.empty());
  EXPECT_EQ(r.to_json().at("n"), 0);
}

TEST(LayerSim, EmbeddingRowAndFirstLayerLastPosition) {
  const auto m = byte_model(5, 3);
  const Vocab v;
  const auto s = layerwise_mask_similarity(m, v, "stone river");
  EXPECT_EQ(s.layers, 4u);
  EXPECT_EQ(s.positions, 12u);
  for (std::size_t t = 0; t < s.positions; ++t) EXPECT_NEAR(s.at(0, t), 1.0, 1e-12);
  // layer 1 at the last position attends to the full sequence in both modes
  EXPECT_NEAR(s.at(1, 11), 1.0, 1e-12);
  EXPECT_LT(s.at(1, 0), 1.0 - 1e-6);
  EXPECT_LT(s.at(2, 11), 1.0 - 1e-9);
}

TEST(LayerSim, CsvLayout) {
  const auto m = byte_model(6, 1);
  const std::vector<int> ids{kBos, 40, 41};
  const auto s = layerwise_mask_similarity(m, std::span<const int>(ids));
  const auto p = (std::filesystem::temp_directory_path() / "l2v_layers.csv").string();
  s.write_csv(p);
  std::ifstream in(p);
  std::string header, row0;
  std::getline(in, header);
  std::getline(in, row0);
  EXPECT_EQ(header, "layer,pos0,pos1,pos2");
  EXPECT_EQ(row0, "0,1,1,1");
  const Vocab v;
  EXPECT_THROW((void)layerwise_mask_similarity(m, v, std::string(60, 'a')), LengthError);
}
