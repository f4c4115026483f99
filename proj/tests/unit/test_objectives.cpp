#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "l2v/objectives.hpp"
#include "l2v/training.hpp"
#include "test_util.hpp"

using namespace l2v;
using l2v::test::random_ids;
using l2v::test::scaled_model;
using l2v::test::tiny_config;

namespace {

std::vector<int> with_bos(std::vector<int> ids) {
  ids.insert(ids.begin(), kBos);
  return ids;
}

// -log softmax(row)[target] from plain doubles
double nll(std::span<const double> logits, std::size_t row, std::size_t vocab, std::size_t target) {
  double mx = -1e300;
  for (std::size_t j = 0; j < vocab; ++j) mx = std::max(mx, logits[row * vocab + j]);
  double z = 0;
  for (std::size_t j = 0; j < vocab; ++j) z += std::exp(logits[row * vocab + j] - mx);
  return -(logits[row * vocab + target] - mx - std::log(z));
}

PoolSpec tagged(int tag) {
  PoolSpec s;
  s.ids = {tag};
  s.include = {true};
  return s;
}

// Encoder that looks embeddings up by the first id of the spec.
Encoder<double> table_encoder(const std::map<int, std::vector<double>>& table) {
  return [table](const PoolSpec& s, double, CounterRng*) {
    const auto& v = table.at(s.ids.front());
    return Tensor<double>({1, v.size()}, v, false);
  };
}

double cos(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace

TEST(Masking, ReplaysDocumentedDrawOrder) {
  CounterRng rng(3, kMaskStream);
  const std::vector<std::vector<int>> rows{with_bos({10, 11, 12, 13, 14, 15, 16, 17}), with_bos({kEos, 20, 21})};
  const auto batch = apply_masking(rows, MaskingConfig{MaskingStrategy::BertStyle, 0.5}, 100, rng);

  CounterRng replay(3, kMaskStream);
  std::vector<Supervision> expect;
  auto ids = rows;
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t i = 1; i < rows[r].size(); ++i) {
      if (rows[r][i] < kNumSpecial) continue;
      if (replay.uniform() >= 0.5) continue;
      expect.push_back({r, i, rows[r][i]});
      const double u = replay.uniform();
      if (u < 0.8) ids[r][i] = kMask;
      else if (u < 0.9) ids[r][i] = 4 + static_cast<int>(replay.uniform() * 96);
    }
  EXPECT_EQ(batch.supervision, expect);
  EXPECT_EQ(batch.input_ids, ids);
  EXPECT_EQ(batch.input_ids[1][1], kEos);
}

TEST(Masking, RatesAndSplit) {
  CounterRng data(1, 0);
  std::vector<std::vector<int>> rows;
  for (int r = 0; r < 400; ++r) rows.push_back(with_bos(random_ids(data, 50, 200)));
  CounterRng rng(9, kMaskStream);
  const auto b = apply_masking(rows, MaskingConfig{MaskingStrategy::BertStyle, 0.2}, 200, rng);
  const double n = 400.0 * 50.0;
  EXPECT_NEAR(static_cast<double>(b.supervision.size()) / n, 0.2, 0.01);
  std::size_t masked = 0, kept = 0;
  for (const auto& s : b.supervision) {
    EXPECT_GE(s.position, 1u);
    const int now = b.input_ids[s.row][s.position];
    masked += now == kMask;
    kept += now == s.original;
  }
  const double sel = static_cast<double>(b.supervision.size());
  EXPECT_NEAR(masked / sel, 0.8, 0.02);
  // unchanged covers the 10% keep share plus random draws that hit the original
  EXPECT_NEAR(kept / sel, 0.1 + 0.1 / 196.0, 0.02);

  CounterRng rng2(9, kMaskStream);
  const auto rb = apply_masking(rows, MaskingConfig{MaskingStrategy::RobertaStyle, 0.2}, 200, rng2);
  for (const auto& s : rb.supervision) EXPECT_EQ(rb.input_ids[s.row][s.position], kMask);
}

TEST(Masking, Errors) {
  CounterRng rng(1, 0);
  EXPECT_THROW((void)apply_masking({{5, 6}}, {}, 100, rng), DataError);
  EXPECT_THROW((void)apply_masking({{kBos, 6}}, MaskingConfig{MaskingStrategy::BertStyle, 0.0}, 100, rng), ConfigError);
  EXPECT_THROW((void)apply_masking({{kBos, 6}}, {}, 4, rng), ConfigError);
  EXPECT_THROW((void)parse_masking_strategy("span"), ConfigError);
  const auto b = apply_masking({{kBos}}, {}, 100, rng);
  EXPECT_EQ(b.skipped_rows, 1u);
}

TEST(Mntp, MatchesLogitOracle) {
  const auto c = tiny_config(30, 1, 8);
  const auto m = scaled_model<double>(c, 4);
  MaskedBatch batch;
  batch.input_ids = {{kBos, 7, kMask, 9, kMask, 11}, {kBos, kMask, 20}};
  batch.supervision = {{0, 2, 15}, {0, 4, 6}, {1, 1, 22}};
  const double loss = mntp_loss(m, batch).item();

  double expect = 0;
  for (const auto& s : batch.supervision) {
    const auto tr = forward(m, batch.input_ids[s.row], AttentionMode::Bidirectional);
    expect += nll(tr.logits.data(), s.position - 1, 30, static_cast<std::size_t>(s.original));
  }
  EXPECT_NEAR(loss, expect / 3.0, 1e-12);
}

TEST(Mntp, ReadsPreviousPosition) {
  const auto c = tiny_config(30, 2, 8);
  const auto m = scaled_model<double>(c, 5);
  MaskedBatch batch;
  batch.input_ids = {{kBos, 7, 8, kMask, 10, 11}};
  batch.supervision = {{0, 3, 9}};
  const double base = mntp_loss(m, batch).item();
  MntpOptions at_masked;
  at_masked.zero_hidden = {{0, 3}};
  EXPECT_EQ(mntp_loss(m, batch, at_masked).item(), base);
  MntpOptions at_prev;
  at_prev.zero_hidden = {{0, 2}};
  // zeroed row normalizes to 0, so the logits are all 0 and the loss is log V
  EXPECT_NEAR(mntp_loss(m, batch, at_prev).item(), std::log(30.0), 1e-12);
}

TEST(Mntp, Errors) {
  const auto m = init_model<double>(tiny_config(), 1);
  MaskedBatch empty;
  empty.input_ids = {{kBos, 5}};
  EXPECT_THROW((void)mntp_loss(m, empty), EmptyInputError);
  MaskedBatch bad = empty;
  bad.supervision = {{0, 0, 5}};
  EXPECT_THROW((void)mntp_loss(m, bad), IndexError);
  bad.supervision = {{0, 2, 5}};
  EXPECT_THROW((void)mntp_loss(m, bad), IndexError);
}

TEST(Contrastive, ClosedFormTwoByTwo) {
  const Tensor<double> q({2, 2}, {1, 0, 0, 1});
  const std::vector<std::size_t> t{0, 1};
  const double loss = info_nce(q, q, std::span<const std::size_t>(t), ContrastiveConfig{0.05}).item();
  EXPECT_NEAR(loss, -std::log(std::exp(20.0) / (std::exp(20.0) + 1.0)), 1e-15);
  EXPECT_THROW((void)info_nce(q, q, std::span<const std::size_t>(t), ContrastiveConfig{0.0}), ConfigError);
}

TEST(Contrastive, SingleSentenceSimcseIsZero) {
  const auto m = scaled_model<double>(tiny_config(), 3);
  PoolSpec s;
  s.ids = {kBos, 5, 6, 7, kEos};
  s.include = {false, true, true, true, true};
  CounterRng rng(1, kDropoutStream);
  EXPECT_EQ(simcse_loss(m, {s}, ContrastiveConfig{}, 0.3, rng).item(), 0.0);
  EXPECT_THROW((void)simcse_loss(m, {}, ContrastiveConfig{}, 0.3, rng), EmptyInputError);
  EXPECT_THROW((void)simcse_loss(m, {s}, ContrastiveConfig{}, 1.0, rng), ConfigError);
}

TEST(Contrastive, SimcseEncodesTwoFullPasses) {
  std::vector<int> order;
  Encoder<double> enc = [&](const PoolSpec& s, double p, CounterRng* rng) {
    EXPECT_EQ(p, 0.1);
    EXPECT_NE(rng, nullptr);
    order.push_back(s.ids.front());
    return Tensor<double>({1, 2}, {1.0 + s.ids.front(), rng->uniform()}, false);
  };
  CounterRng rng(2, 0);
  (void)simcse_loss<double>(enc, {tagged(1), tagged(2), tagged(3)}, ContrastiveConfig{}, 0.1, rng);
  EXPECT_EQ(order, (std::vector<int>{1, 2, 3, 1, 2, 3}));
}

TEST(Contrastive, SupervisedCandidateOrder) {
  const std::map<int, std::vector<double>> table{
      {1, {1.0, 0.2, 0.0}}, {2, {0.1, 1.0, 0.3}},   // queries
      {11, {0.9, 0.1, 0.2}}, {12, {0.0, 0.8, 0.5}}, // positives
      {21, {0.7, 0.5, 0.1}}, {22, {0.3, 0.3, 0.9}}, {23, {-0.2, 0.9, 0.0}}};
  std::vector<ContrastiveItem> batch{{tagged(1), tagged(11), {tagged(21)}},
                                     {tagged(2), tagged(12), {tagged(22), tagged(23)}}};
  const double tau = 0.1;
  const double loss = supervised_contrastive_loss<double>(table_encoder(table), batch, ContrastiveConfig{tau}).item();
  const std::vector<int> cands{11, 12, 21, 22, 23};
  double expect = 0;
  for (int qi = 0; qi < 2; ++qi) {
    const auto& q = table.at(qi + 1);
    double z = 0;
    for (int c : cands) z += std::exp(cos(q, table.at(c)) / tau);
    expect += -(cos(q, table.at(cands[static_cast<std::size_t>(qi)])) / tau - std::log(z));
  }
  EXPECT_NEAR(loss, expect / 2.0, 1e-12);
  EXPECT_THROW((void)supervised_contrastive_loss<double>(table_encoder(table), {}, ContrastiveConfig{}), EmptyInputError);
}
