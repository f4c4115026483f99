#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "l2v/transformer.hpp"
#include "test_util.hpp"

using namespace l2v;
using l2v::test::random_ids;
using l2v::test::scaled_model;
using l2v::test::tiny_config;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat weight_of(const Model<double>& m, const std::string& name) {
  const auto& w = m.weight(name);
  const std::size_t r = w.dim(0), c = w.numel() / r;
  Mat out(r, std::vector<double>(c));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i][j] = w.data()[i * c + j];
  return out;
}

std::vector<double> gain_of(const Model<double>& m, const std::string& name) {
  return {m.weight(name).data().begin(), m.weight(name).data().end()};
}

// y = x W^T for W[out, in]
std::vector<double> linear(const Mat& w, const std::vector<double>& x) {
  std::vector<double> y(w.size(), 0.0);
  for (std::size_t o = 0; o < w.size(); ++o)
    for (std::size_t i = 0; i < x.size(); ++i) y[o] += w[o][i] * x[i];
  return y;
}

std::vector<double> rmsnorm(const std::vector<double>& x, const std::vector<double>& g, double eps) {
  double ss = 0;
  for (double v : x) ss += v * v;
  const double r = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * r * g[i];
  return y;
}

void rotate(std::vector<double>& x, std::size_t pos, std::size_t heads, double theta) {
  const std::size_t dh = x.size() / heads;
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < dh / 2; ++i) {
      const double ang = static_cast<double>(pos) * std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      double& a = x[h * dh + 2 * i];
      double& b = x[h * dh + 2 * i + 1];
      const double na = a * std::cos(ang) - b * std::sin(ang), nb = a * std::sin(ang) + b * std::cos(ang);
      a = na;
      b = nb;
    }
}

// Straight-line reference forward returning the final normed rows.
Mat reference_forward(const Model<double>& m, const std::vector<int>& ids, bool causal) {
  const auto& c = m.config();
  const std::size_t n = ids.size(), d = c.d_model, dh = c.d_head();
  const Mat embed = weight_of(m, "embed");
  Mat h(n);
  for (std::size_t t = 0; t < n; ++t) h[t] = embed[static_cast<std::size_t>(ids[t])];
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto g1 = gain_of(m, layer_name(l, "attn_norm"));
    Mat q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
      const auto a = rmsnorm(h[t], g1, c.norm_eps);
      q[t] = linear(weight_of(m, layer_name(l, "wq")), a);
      k[t] = linear(weight_of(m, layer_name(l, "wk")), a);
      v[t] = linear(weight_of(m, layer_name(l, "wv")), a);
      rotate(q[t], t, c.n_heads, c.rope_theta);
      rotate(k[t], t, c.n_heads, c.rope_theta);
    }
    Mat o(n, std::vector<double>(d, 0.0));
    for (std::size_t hd = 0; hd < c.n_heads; ++hd)
      for (std::size_t t = 0; t < n; ++t) {
        const std::size_t last = causal ? t + 1 : n;
        std::vector<double> s(last);
        double mx = -1e300;
        for (std::size_t u = 0; u < last; ++u) {
          double dot = 0;
          for (std::size_t j = 0; j < dh; ++j) dot += q[t][hd * dh + j] * k[u][hd * dh + j];
          s[u] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[u]);
        }
        double z = 0;
        for (auto& x : s) z += (x = std::exp(x - mx));
        for (std::size_t u = 0; u < last; ++u)
          for (std::size_t j = 0; j < dh; ++j) o[t][hd * dh + j] += s[u] / z * v[u][hd * dh + j];
      }
    for (std::size_t t = 0; t < n; ++t) {
      const auto proj = linear(weight_of(m, layer_name(l, "wo")), o[t]);
      for (std::size_t j = 0; j < d; ++j) h[t][j] += proj[j];
      const auto mm = rmsnorm(h[t], gain_of(m, layer_name(l, "mlp_norm")), c.norm_eps);
      const auto gate = linear(weight_of(m, layer_name(l, "w_gate")), mm);
      const auto up = linear(weight_of(m, layer_name(l, "w_up")), mm);
      std::vector<double> f(gate.size());
      for (std::size_t j = 0; j < f.size(); ++j) f[j] = gate[j] / (1.0 + std::exp(-gate[j])) * up[j];
      const auto down = linear(weight_of(m, layer_name(l, "w_down")), f);
      for (std::size_t j = 0; j < d; ++j) h[t][j] += down[j];
    }
  }
  const auto gf = gain_of(m, "final_norm");
  for (auto& row : h) row = rmsnorm(row, gf, c.norm_eps);
  return h;
}

template <class T>
std::vector<T> vec(std::span<const T> s) { return {s.begin(), s.end()}; }

double row_diff(const Tensor<double>& a, std::size_t ra, const Tensor<double>& b, std::size_t rb) {
  const std::size_t d = a.dim(1);
  double m = 0;
  for (std::size_t j = 0; j < d; ++j) m = std::max(m, std::abs(a.data()[ra * d + j] - b.data()[rb * d + j]));
  return m;
}

}  // namespace

TEST(Transformer, LayoutAndInit) {
  const auto c = tiny_config();
  const auto layout = weight_layout(c);
  EXPECT_EQ(layout.size(), 2u + 9u * c.n_layers + 1u);
  EXPECT_EQ(layout.front().second, (Shape{40, 16}));
  EXPECT_EQ(layout.back().second, (Shape{16, 40}));
  const auto m = init_model<double>(c, 3);
  for (const auto& [name, w] : m.weights()) {
    for (double v : w.data()) {
      if (is_norm_weight(name)) EXPECT_EQ(v, 1.0);
      else EXPECT_LE(std::abs(v), 0.04 + 1e-12);
    }
  }
  const auto again = init_model<double>(c, 3);
  EXPECT_EQ(vec(again.weight("layers.1.wq").data()), vec(m.weight("layers.1.wq").data()));
  EXPECT_NE(vec(init_model<double>(c, 4).weight("layers.1.wq").data()), vec(m.weight("layers.1.wq").data()));
}

TEST(Transformer, ConfigValidation) {
  auto c = tiny_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.d_model = 12;
  c.n_heads = 4;  // d_head 3 is odd
  EXPECT_THROW(c.validate(), ConfigError);
  nlohmann::json j = tiny_config();
  j["bogus"] = 1;
  EXPECT_THROW((void)j.get<ModelConfig>(), ConfigError);
  nlohmann::json ok = tiny_config();
  EXPECT_EQ(ok.get<ModelConfig>(), tiny_config());
}

TEST(Transformer, MatchesReferenceForward) {
  const auto c = tiny_config(40, 2, 16);
  const auto m = scaled_model<double>(c, 5);
  CounterRng rng(1, 0);
  const auto ids = random_ids(rng, 9, c.vocab_size);
  for (AttentionMode mode : {AttentionMode::Causal, AttentionMode::Bidirectional}) {
    const auto tr = forward(m, ids, mode);
    const auto ref = reference_forward(m, ids, mode == AttentionMode::Causal);
    ASSERT_EQ(tr.output().shape(), (Shape{9, 16}));
    ASSERT_EQ(tr.hidden.size(), 3u);
    for (std::size_t t = 0; t < ids.size(); ++t)
      for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(tr.output().data()[t * 16 + j], ref[t][j], 1e-10);
    // logits = normed x head
    const auto& head = m.weight("head");
    double expect = 0;
    for (std::size_t j = 0; j < 16; ++j) expect += ref[4][j] * head.data()[j * 40 + 7];
    EXPECT_NEAR(tr.logits.data()[4 * 40 + 7], expect, 1e-10);
  }
}

TEST(Transformer, CausalPrefixInvariance) {
  const auto c = tiny_config();
  const auto m = scaled_model<double>(c, 2);
  CounterRng rng(2, 0);
  const auto ids = random_ids(rng, 12, c.vocab_size);
  const std::vector<int> prefix(ids.begin(), ids.begin() + 5);
  const auto full = forward(m, ids, AttentionMode::Causal);
  const auto part = forward(m, prefix, AttentionMode::Causal);
  for (std::size_t t = 0; t < 5; ++t) EXPECT_LT(row_diff(full.output(), t, part.output(), t), 1e-12);
  const auto bfull = forward(m, ids, AttentionMode::Bidirectional);
  const auto bpart = forward(m, prefix, AttentionMode::Bidirectional);
  EXPECT_GT(row_diff(bfull.output(), 0, bpart.output(), 0), 1e-4);
}

TEST(Transformer, ModesAgreeOnLastPositionOfOneLayer) {
  const auto c = tiny_config(40, 1);
  const auto m = scaled_model<double>(c, 8);
  CounterRng rng(8, 0);
  const auto ids = random_ids(rng, 10, c.vocab_size);
  const auto a = forward(m, ids, AttentionMode::Causal);
  const auto b = forward(m, ids, AttentionMode::Bidirectional);
  EXPECT_LT(row_diff(a.output(), 9, b.output(), 9), 1e-12);
  EXPECT_GT(row_diff(a.output(), 0, b.output(), 0), 1e-4);
  const std::vector<int> one{ids[0]};
  EXPECT_LT(row_diff(forward(m, one, AttentionMode::Causal).output(), 0,
                     forward(m, one, AttentionMode::Bidirectional).output(), 0), 1e-15);
}

TEST(Transformer, DropoutDeterministicPerSeed) {
  auto c = tiny_config();
  c.dropout_p = 0.3;
  const auto m = scaled_model<float>(c, 4);
  CounterRng rng(4, 0);
  const auto ids = random_ids(rng, 8, c.vocab_size);
  CounterRng r1(10, 1), r2(10, 1), r3(11, 1);
  const auto a = forward(m, ids, AttentionMode::Bidirectional, true, &r1);
  const auto b = forward(m, ids, AttentionMode::Bidirectional, true, &r2);
  const auto d = forward(m, ids, AttentionMode::Bidirectional, true, &r3);
  EXPECT_EQ(vec(a.output().data()), vec(b.output().data()));
  EXPECT_NE(vec(a.output().data()), vec(d.output().data()));
  EXPECT_THROW((void)forward(m, ids, AttentionMode::Causal, true, nullptr), ConfigError);
  const auto e = forward(m, ids, AttentionMode::Bidirectional);
  const auto f = forward(m, ids, AttentionMode::Bidirectional);
  EXPECT_EQ(vec(e.output().data()), vec(f.output().data()));
}

TEST(Transformer, InputErrors) {
  const auto m = init_model<float>(tiny_config(), 1);
  EXPECT_THROW((void)forward(m, std::vector<int>{}, AttentionMode::Causal), LengthError);
  EXPECT_THROW((void)forward(m, std::vector<int>(33, 5), AttentionMode::Causal), LengthError);
  EXPECT_THROW((void)forward(m, std::vector<int>{5, 40}, AttentionMode::Causal), VocabError);
  EXPECT_THROW((void)forward(m, std::vector<int>{-1}, AttentionMode::Causal), VocabError);
  EXPECT_THROW((void)m.weight("nope"), NameError);
}

TEST(Transformer, KeepFinalRowsZeroesRows) {
  const auto m = scaled_model<double>(tiny_config(), 6);
  const std::vector<int> ids{5, 6, 7, 8};
  ForwardOptions o;
  o.keep_final_rows = {true, false, true, false};
  const auto tr = forward(m, ids, o);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(tr.output().data()[16 + j], 0.0);
  const auto plain = forward(m, ids, AttentionMode::Causal);
  EXPECT_LT(row_diff(tr.output(), 2, plain.output(), 2), 1e-15);
}

TEST(Transformer, RecordAttentionRowsSumToOne) {
  const auto m = scaled_model<double>(tiny_config(), 6);
  const std::vector<int> ids{5, 6, 7, 8, 9};
  ForwardOptions o;
  o.record_attention = true;
  const auto tr = forward(m, ids, o);
  ASSERT_EQ(tr.attention.size(), 2u);
  ASSERT_EQ(tr.attention[0].size(), 2u * 5u * 5u);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t q = 0; q < 5; ++q) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) {
        const double p = tr.attention[0][(h * 5 + q) * 5 + k];
        if (k > q) {
          EXPECT_LT(p, 1e-12);
        }
        s += p;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Transformer, CastAndClone) {
  const auto m = scaled_model<double>(tiny_config(), 9);
  auto c = m.clone();
  c.weight("embed").mutable_data()[0] += 1.0;
  EXPECT_NE(c.weight("embed").data()[0], m.weight("embed").data()[0]);
  const auto f = m.cast<float>();
  EXPECT_EQ(f.weight("head").data()[3], static_cast<float>(m.weight("head").data()[3]));
}
