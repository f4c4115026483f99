#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "l2v/rng.hpp"

using namespace l2v;

TEST(SplitMix, ReferenceOutputs) {
  // first two outputs of the reference generator seeded with 0
  EXPECT_EQ(splitmix64(0), 0xe220a8397b1dcdafULL);
  EXPECT_EQ(splitmix64(0x9e3779b97f4a7c15ULL), 0x6e789e6aa1b965f4ULL);
}

TEST(CounterRng, DrawIsFunctionOfSeedStreamCounter) {
  CounterRng r(42, 7);
  const std::uint64_t key = splitmix64(42 ^ splitmix64(7));
  for (std::uint64_t n = 0; n < 16; ++n) EXPECT_EQ(r.next_u64(), splitmix64(key ^ n));
  EXPECT_EQ(r.counter(), 16u);
}

TEST(CounterRng, SameSeedSameSequence) {
  CounterRng a(3), b(3), c(4);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(CounterRng, UniformRange) {
  CounterRng r(1);
  double lo = 1.0, hi = 0.0, sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
    sum += u;
  }
  EXPECT_LT(lo, 1e-3);
  EXPECT_GT(hi, 1.0 - 1e-3);
  EXPECT_NEAR(sum / n, 0.5, 0.005);
}

TEST(CounterRng, BelowCoversRange) {
  CounterRng r(9);
  std::vector<int> counts(6, 0);
  for (int i = 0; i < 60000; ++i) {
    const auto k = r.below(6);
    ASSERT_LT(k, 6u);
    ++counts[k];
  }
  for (int c : counts) EXPECT_NEAR(c, 10000, 500);
}

TEST(CounterRng, BelowMatchesUniformScaling) {
  CounterRng a(5), b(5);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(a.below(37), static_cast<std::uint64_t>(b.uniform() * 37.0));
}

TEST(CounterRng, NormalMoments) {
  CounterRng r(11);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(CounterRng, TruncatedNormalBounded) {
  CounterRng r(2);
  for (int i = 0; i < 10000; ++i) EXPECT_LE(std::abs(r.truncated_normal(0.5)), 1.0);
}

TEST(CounterRng, ForkDoesNotAdvanceParent) {
  CounterRng a(8), b(8);
  CounterRng child = a.fork(1);
  EXPECT_EQ(a.counter(), 0u);
  EXPECT_EQ(a.next_u64(), b.next_u64());
  CounterRng child2 = b.fork(1);
  EXPECT_EQ(child.next_u64(), child2.next_u64());
  EXPECT_NE(a.fork(1).next_u64(), a.fork(2).next_u64());
}

TEST(CounterRng, StreamsAreDistinct) {
  std::set<std::uint64_t> firsts;
  for (std::uint64_t s = 0; s < 100; ++s) firsts.insert(CounterRng(1, s).next_u64());
  EXPECT_EQ(firsts.size(), 100u);
}
