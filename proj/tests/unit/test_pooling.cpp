#include <gtest/gtest.h>

#include <cmath>

#include "l2v/pooling.hpp"
#include "test_util.hpp"

using namespace l2v;
using l2v::test::scaled_model;

namespace {

int byte_id(char c) { return kByteBase + static_cast<unsigned char>(c); }

ModelConfig byte_config() {
  auto c = l2v::test::tiny_config(kBaseVocab, 2, 16);
  c.max_seq_len = 24;
  return c;
}

}  // namespace

TEST(PoolingWeights, ClosedForms) {
  const std::vector<bool> inc{false, true, true, true};
  EXPECT_EQ(pooling_weights<double>(inc, PoolingMode::Mean), (std::vector<double>{0, 1.0 / 3, 1.0 / 3, 1.0 / 3}));
  const auto w = pooling_weights<double>(inc, PoolingMode::WeightedMean);
  EXPECT_DOUBLE_EQ(w[1], 1.0 / 6);
  EXPECT_DOUBLE_EQ(w[2], 2.0 / 6);
  EXPECT_DOUBLE_EQ(w[3], 3.0 / 6);
  EXPECT_EQ(w[0], 0.0);
  EXPECT_EQ(pooling_weights<double>({true, true, false}, PoolingMode::Eos), (std::vector<double>{0, 1, 0}));
  EXPECT_THROW((void)pooling_weights<double>({false, false}, PoolingMode::Mean), EmptyInputError);
}

TEST(Pool, HandMatrix) {
  const Tensor<double> h({3, 2}, {1, 2, 3, 4, 5, 6});
  const std::vector<bool> inc{false, true, true};
  EXPECT_EQ(pool(h, inc, PoolingMode::Mean).vector, (std::vector<double>{4, 5}));
  const auto wm = pool(h, inc, PoolingMode::WeightedMean).vector;
  EXPECT_NEAR(wm[0], (3.0 + 2 * 5.0) / 3.0, 1e-15);
  EXPECT_NEAR(wm[1], (4.0 + 2 * 6.0) / 3.0, 1e-15);
  const auto e = pool(h, inc, PoolingMode::Eos);
  EXPECT_EQ(e.vector, (std::vector<double>{5, 6}));
  EXPECT_EQ(e.included_positions, (std::vector<std::size_t>{2}));
  EXPECT_EQ(pool(h, inc, PoolingMode::Mean).included_positions, (std::vector<std::size_t>{1, 2}));
  EXPECT_THROW((void)pool(h, {true, true}, PoolingMode::Mean), ShapeError);
}

TEST(Pool, ParseNames) {
  EXPECT_EQ(parse_pooling("weighted-mean"), PoolingMode::WeightedMean);
  EXPECT_EQ(parse_pooling("eos"), PoolingMode::Eos);
  EXPECT_THROW((void)parse_pooling("max"), ConfigError);
  EXPECT_EQ(parse_attention_mode("bi"), AttentionMode::Bidirectional);
  EXPECT_THROW((void)parse_attention_mode("sideways"), ConfigError);
}

TEST(PoolSpecs, InstructionExcluded) {
  const Vocab v;
  const auto s = build_pool_spec(v, "ab", "xyz", 16);
  EXPECT_EQ(s.ids, (std::vector<int>{kBos, byte_id('a'), byte_id('b'), byte_id('x'), byte_id('y'), byte_id('z'), kEos}));
  EXPECT_EQ(s.include, (std::vector<bool>{false, false, false, true, true, true, true}));
  const auto plain = build_pool_spec(v, "", "xy", 16);
  EXPECT_EQ(plain.include, (std::vector<bool>{false, true, true, true}));
  EXPECT_THROW((void)build_pool_spec(v, "ab", "xyz", 6), LengthError);
  EXPECT_THROW((void)build_pool_spec(v, "ab", "", 16), EmptyInputError);
}

TEST(PoolSpecs, EchoReadsSecondCopy) {
  const Vocab v;
  const auto s = build_echo_spec(v, "i", "xy", 16);
  const int i = byte_id('i'), x = byte_id('x'), y = byte_id('y');
  EXPECT_EQ(s.ids, (std::vector<int>{kBos, i, x, y, i, x, y, kEos}));
  EXPECT_EQ(s.include, (std::vector<bool>{false, false, false, false, false, true, true, false}));
  EXPECT_THROW((void)build_echo_spec(v, "i", "xy", 7), LengthError);
}

TEST(Embed, MatchesForwardThenPool) {
  const auto m = scaled_model<double>(byte_config(), 2);
  const Vocab v;
  for (PoolingMode p : {PoolingMode::Mean, PoolingMode::WeightedMean, PoolingMode::Eos}) {
    const auto e = embed(m, EmbeddingRequest{"q:", "hello", p, AttentionMode::Bidirectional}, v);
    const auto spec = build_pool_spec(v, "q:", "hello", 24);
    const auto tr = forward(m, spec.ids, AttentionMode::Bidirectional);
    const auto w = pooling_weights<double>(spec.include, p);
    for (std::size_t j = 0; j < 16; ++j) {
      double expect = 0;
      for (std::size_t t = 0; t < spec.ids.size(); ++t) expect += w[t] * tr.output().at(t, j);
      EXPECT_NEAR(e.vector[j], expect, 1e-14);
    }
  }
}

TEST(Embed, CausalInstructionChangesTextStates) {
  // instruction tokens are never pooled but do condition the text positions
  const auto m = scaled_model<double>(byte_config(), 3);
  const Vocab v;
  const auto a = embed(m, EmbeddingRequest{"ab", "xyz", PoolingMode::Mean, AttentionMode::Causal}, v);
  const auto b = embed(m, EmbeddingRequest{"cd", "xyz", PoolingMode::Mean, AttentionMode::Causal}, v);
  double diff = 0;
  for (std::size_t j = 0; j < 16; ++j) diff = std::max(diff, std::abs(a.vector[j] - b.vector[j]));
  EXPECT_GT(diff, 1e-6);
  EXPECT_EQ(a.included_positions, (std::vector<std::size_t>{3, 4, 5, 6}));
}

TEST(Embed, EchoIsCausalOnly) {
  const auto m = scaled_model<double>(byte_config(), 4);
  const Vocab v;
  EXPECT_THROW((void)embed_echo(m, EmbeddingRequest{"", "xy", PoolingMode::Mean, AttentionMode::Bidirectional}, v),
               ConfigError);
  const auto e = embed_echo(m, EmbeddingRequest{"", "xy", PoolingMode::Mean, AttentionMode::Causal}, v);
  const auto spec = build_echo_spec(v, "", "xy", 24);
  const auto tr = forward(m, spec.ids, AttentionMode::Causal);
  for (std::size_t j = 0; j < 16; ++j) {
    EXPECT_NEAR(e.vector[j], 0.5 * (tr.output().at(3, j) + tr.output().at(4, j)), 1e-14);
  }
}

TEST(Embed, DeterministicAndLengthChecked) {
  const auto m = scaled_model<float>(byte_config(), 5);
  const Vocab v;
  const EmbeddingRequest req{"", "stone river", PoolingMode::Mean, AttentionMode::Bidirectional};
  EXPECT_EQ(embed(m, req, v).vector, embed(m, req, v).vector);
  EXPECT_THROW((void)embed(m, EmbeddingRequest{"", std::string(30, 'a'), PoolingMode::Mean,
                                               AttentionMode::Bidirectional}, v),
               LengthError);
}
