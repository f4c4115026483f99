#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "l2v/probe.hpp"
#include "l2v/synthetic.hpp"
#include "test_util.hpp"

using namespace l2v;
using l2v::test::scaled_model;

TEST(TokenizeWords, SpansWithByteVocab) {
  const Vocab v;
  const auto t = tokenize_words(v, {"ab", "cd", "e"});
  // BOS a b ' ' c d ' ' e; the space before a word is part of it
  ASSERT_EQ(t.ids.size(), 8u);
  EXPECT_EQ(t.words, (std::vector<WordSpan>{{0, 1, 2}, {1, 3, 5}, {2, 6, 7}}));
  EXPECT_THROW((void)tokenize_words(v, {}), EmptyInputError);
  EXPECT_THROW((void)tokenize_words(v, {"a", ""}), DataError);
}

TEST(TokenizeWords, MergedVocabKeepsOneSpanPerWord) {
  const Vocab v = train_bpe_up_to("stone river stone river cloud", 300, 1);
  const auto t = tokenize_words(v, {"stone", "river", "cloud"});
  ASSERT_EQ(t.words.size(), 3u);
  EXPECT_EQ(t.words.front().first, 1u);
  EXPECT_EQ(t.words.back().last, t.ids.size() - 1);
  for (std::size_t w = 1; w < 3; ++w) EXPECT_EQ(t.words[w].first, t.words[w - 1].last + 1);
}

TEST(WordRepresentations, ShiftIndexSets) {
  // row r holds (r, r^2), so a mean reveals which rows were read
  std::vector<double> v;
  for (int r = 0; r < 7; ++r) {
    v.push_back(r);
    v.push_back(r * r);
  }
  const Tensor<double> h({7, 2}, v);
  const std::vector<WordSpan> spans{{0, 1, 1}, {1, 2, 4}, {2, 5, 6}};
  const auto plain = word_representations(h, spans, false);
  const auto shifted = word_representations(h, spans, true);
  EXPECT_EQ(plain.at(0, 0), 1.0);
  EXPECT_EQ(shifted.at(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(plain.at(1, 0), 3.0);                  // rows 2,3,4
  EXPECT_DOUBLE_EQ(plain.at(1, 1), (4 + 9 + 16) / 3.0);
  EXPECT_DOUBLE_EQ(shifted.at(1, 0), 2.0);                // rows 1,2,3
  EXPECT_DOUBLE_EQ(shifted.at(1, 1), (1 + 4 + 9) / 3.0);
  EXPECT_DOUBLE_EQ(shifted.at(2, 1), (16 + 25) / 2.0);    // rows 4,5
  EXPECT_THROW((void)word_representations(h, {{0, 0, 1}}, true), IndexError);
  EXPECT_THROW((void)word_representations(h, {{0, 3, 7}}, false), IndexError);
  EXPECT_THROW((void)word_representations(h, {}, false), EmptyInputError);
}

TEST(ProbeTraining, SeparableClustersReachFullAccuracy) {
  CounterRng rng(2, 0);
  std::vector<double> x;
  std::vector<std::size_t> y;
  const double centers[3][2] = {{3, 0}, {-3, 2}, {0, -3}};
  for (int i = 0; i < 150; ++i) {
    const std::size_t c = static_cast<std::size_t>(i % 3);
    x.push_back(centers[c][0] + 0.3 * rng.normal());
    x.push_back(centers[c][1] + 0.3 * rng.normal());
    y.push_back(c);
  }
  const Tensor<double> reps({150, 2}, x);
  ProbeConfig cfg;
  cfg.steps = 400;
  cfg.lr = 0.05;
  const auto t = train_probe(reps, y, 4, cfg);
  EXPECT_EQ(accuracy(t.probe.predict(reps), y), 1.0);
  EXPECT_EQ(t.absent_classes, (std::vector<std::size_t>{3}));
  EXPECT_LT(t.losses.back(), t.losses.front());
  EXPECT_THROW((void)train_probe(reps, std::vector<std::size_t>(150, 5), 4, cfg), IndexError);
  EXPECT_THROW((void)train_probe(reps, {0, 1}, 4, cfg), ShapeError);
  cfg.dropout = 1.0;
  EXPECT_THROW((void)train_probe(reps, y, 4, cfg), ConfigError);
}

TEST(ProbeSplit, DisjointEightyTwenty) {
  const auto [train, test] = split_sentences(50, 3);
  EXPECT_EQ(test.size(), 10u);
  EXPECT_EQ(train.size(), 40u);
  std::set<std::size_t> all(train.begin(), train.end());
  for (auto i : test) EXPECT_TRUE(all.insert(i).second);
  EXPECT_EQ(all.size(), 50u);
  EXPECT_EQ(split_sentences(50, 3), split_sentences(50, 3));
  EXPECT_NE(split_sentences(50, 3).second, split_sentences(50, 4).second);
  EXPECT_EQ(split_sentences(2, 0).second.size(), 1u);
  EXPECT_THROW((void)split_sentences(1, 0), DataError);
}

TEST(ProbeTask, ReportCountsAndBaseline) {
  const auto corpus = synthetic::next_token_corpus(30, 4);
  std::string text;
  for (const auto& s : corpus) text += s.text() + "\n";
  const Vocab v = train_bpe_up_to(text, 320, 0);
  auto c = l2v::test::tiny_config(v.size(), 1, 16);
  const auto m = scaled_model<float>(c, 1);
  ProbeConfig cfg;
  cfg.steps = 50;
  const auto r = probe_task(m, v, corpus, AttentionMode::Causal, true, cfg, "next-token");
  std::size_t words = 0;
  for (const auto& s : corpus) words += s.tokens.size();
  EXPECT_EQ(r.n_train + r.n_test, words);
  EXPECT_GE(r.accuracy, 0.0);
  EXPECT_LE(r.accuracy, 1.0);
  EXPECT_GT(r.majority_baseline, 0.0);
  EXPECT_EQ(r.to_json().at("task"), "next-token");
  EXPECT_EQ(r.to_json().at("mode"), "causal");
}

TEST(Spearman, HandValues) {
  EXPECT_NEAR(spearman({1, 2, 3, 5, 4}, {1, 2, 3, 4, 5}), 0.9, 1e-15);
  EXPECT_NEAR(spearman({10, 20, 30}, {3, 2, 1}), -1.0, 1e-15);
  // tied predictions get rank 2.5
  EXPECT_EQ(average_ranks(std::vector<double>{1, 2, 2, 3}), (std::vector<double>{1, 2.5, 2.5, 4}));
  EXPECT_NEAR(spearman({1, 2, 2, 3}, {1, 2, 3, 4}), 4.5 / std::sqrt(22.5), 1e-15);
}

TEST(Spearman, Errors) {
  EXPECT_THROW((void)spearman({1, 1, 1}, {1, 2, 3}), UndefinedCorrelationError);
  EXPECT_THROW((void)spearman({1, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW((void)spearman({1}, {1}), EmptyInputError);
  EXPECT_THROW((void)spearman({1, std::nan("")}, {1, 2}), NumericFault);
}

TEST(Sts, SpearmanOfCosines) {
  const auto pairs = synthetic::sts_pairs(20, 2);
  const Vocab v;
  auto c = l2v::test::tiny_config(kBaseVocab, 1, 16);
  c.max_seq_len = 96;
  const auto m = scaled_model<double>(c, 2);
  const auto r = sts_eval(m, v, pairs, PoolingMode::Mean, AttentionMode::Bidirectional);
  ASSERT_EQ(r.predicted.size(), 20u);
  const auto a = embed(m, EmbeddingRequest{"", pairs[0].first, PoolingMode::Mean, AttentionMode::Bidirectional}, v);
  const auto b = embed(m, EmbeddingRequest{"", pairs[0].second, PoolingMode::Mean, AttentionMode::Bidirectional}, v);
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t j = 0; j < 16; ++j) {
    ab += a.vector[j] * b.vector[j];
    aa += a.vector[j] * a.vector[j];
    bb += b.vector[j] * b.vector[j];
  }
  EXPECT_NEAR(r.predicted[0], ab / std::sqrt(aa * bb), 1e-12);
  std::vector<double> gold;
  for (const auto& p : pairs) gold.push_back(p.score);
  EXPECT_DOUBLE_EQ(r.spearman, spearman(r.predicted, gold));
}
