#include "nestfact/choice_kernel.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

using namespace nestfact;

namespace {

ParamVector zero_params(const Dims& d) { return ParamVector(d); }

Dims small_dims() {
  Dims d;
  d.N = 2;
  d.J = 3;
  d.C = 2;
  d.T = 4;
  d.K = 1;
  d.M = 1;
  d.P = 2;
  d.Q = 1;
  d.R = 1;
  return d;
}

}  // namespace

TEST(ParamLayout, BlocksAreContiguousAndSized) {
  Dims d = small_dims();
  auto layout = ParamLayout::make(d);
  std::size_t expected = 0;
  expected += 2 * 1 + 3 * 1 + 2 * 1 + 3 * 1 + 3 * 2 + 2 * 1;  // stage-1 blocks
  expected += 2 * 1 + 2 * 1 + 2 * 2 + 2 * 1 + 4 * 1 + 2 * 2;  // stage-2 blocks
  EXPECT_EQ(layout.total, expected);
  // Offsets tile the vector without gaps.
  std::size_t off = 0;
  for (int b = 0; b < kNumBlocks; ++b) {
    EXPECT_EQ(layout.offset[b], off);
    off += layout.block_size(static_cast<Block>(b));
  }
  EXPECT_EQ(off, layout.total);
}

TEST(UpcUtility, HandEvaluations) {
  Dims d = small_dims();
  std::vector<double> w = {1.0, 0.0};
  std::vector<double> x = {0.0};
  {
    auto p = zero_params(d);
    EXPECT_DOUBLE_EQ(upc_utility(p.view(), 0, 0, 1.0, w, x), 0.0);
  }
  {
    auto p = zero_params(d);
    p.at(Block::Theta, 0) = 2.0;
    p.at(Block::Beta, 0) = 3.0;
    EXPECT_DOUBLE_EQ(upc_utility(p.view(), 0, 0, 1.0, w, x), 6.0);
  }
  {
    auto p = zero_params(d);
    p.at(Block::Gamma, 0) = 1.0;
    p.at(Block::Lambda, 0) = 0.5;
    EXPECT_NEAR(upc_utility(p.view(), 0, 0, std::exp(2.0), w, x), -1.0, 1e-12);
  }
  {
    auto p = zero_params(d);
    p.at(Block::Rho, 1, 1) = 4.0;
    std::vector<double> w2 = {1.0, 1.0};
    EXPECT_DOUBLE_EQ(upc_utility(p.view(), 0, 1, 1.0, w2, x), 4.0);
    p.at(Block::Sigma, 1, 0) = 2.0;
    std::vector<double> x2 = {3.0};
    EXPECT_DOUBLE_EQ(upc_utility(p.view(), 1, 1, 1.0, w2, x2), 10.0);
  }
}

TEST(UpcUtility, ErrorsOnBadInputs) {
  Dims d = small_dims();
  auto p = zero_params(d);
  std::vector<double> w = {1.0, 0.0};
  std::vector<double> x = {0.0};
  EXPECT_THROW(upc_utility(p.view(), 0, 0, 0.0, w, x), NumericError);
  EXPECT_THROW(upc_utility(p.view(), 0, 0, -1.0, w, x), NumericError);
  std::vector<double> w_bad = {1.0};
  EXPECT_THROW(upc_utility(p.view(), 0, 0, 1.0, w_bad, x), ConfigError);
}

TEST(ConditionalProbs, SpecExamples) {
  std::vector<double> u = {0.0, 0.0};
  std::vector<std::uint8_t> avail = {1, 1};
  std::vector<double> p(2);
  conditional_choice_probs(u, avail, p);
  EXPECT_NEAR(p[0], 0.5, 1e-15);
  EXPECT_NEAR(p[1], 0.5, 1e-15);

  u = {std::log(2.0), 0.0};
  conditional_choice_probs(u, avail, p);
  EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-15);

  u = {100.0, 0.0};
  avail = {0, 1};
  conditional_choice_probs(u, avail, p);
  EXPECT_EQ(p[0], 0.0);
  EXPECT_NEAR(p[1], 1.0, 1e-15);

  avail = {0, 0};
  EXPECT_THROW(conditional_choice_probs(u, avail, p), NumericError);
}

TEST(InclusiveValue, SpecExamples) {
  std::vector<double> u = {0.0};
  std::vector<std::uint8_t> a = {1};
  EXPECT_DOUBLE_EQ(inclusive_value(u, a), 0.0);
  std::vector<double> u2 = {0.0, 0.0};
  std::vector<std::uint8_t> a2 = {1, 1};
  EXPECT_NEAR(inclusive_value(u2, a2), std::log(2.0), 1e-15);
  std::vector<double> u3 = {5.0, 0.0};
  std::vector<std::uint8_t> a3 = {0, 1};
  EXPECT_DOUBLE_EQ(inclusive_value(u3, a3), 0.0);
  std::vector<std::uint8_t> a4 = {0, 0};
  EXPECT_EQ(inclusive_value(u3, a4), kNegInf);
}

TEST(CategoryUtility, HandEvaluationsAndSentinel) {
  Dims d = small_dims();
  std::vector<double> w = {1.0, 0.0};
  std::vector<double> x = {0.0};
  {
    auto p = zero_params(d);
    EXPECT_DOUBLE_EQ(category_utility(p.view(), 0, 0, 0.0, 0, 0, w, x), 0.0);
  }
  {
    auto p = zero_params(d);
    p.at(Block::Gamma, 0) = 1.0;
    p.at(Block::LambdaC, 0) = 1.0;
    EXPECT_NEAR(category_utility(p.view(), 0, 0, std::log(2.0), 0, 0, w, x), 0.693147, 1e-6);
    // Sentinel IV forces -inf regardless of other terms.
    p.at(Block::Wday, 0, 1) = 3.0;
    EXPECT_EQ(category_utility(p.view(), 0, 0, kNegInf, 0, 1, w, x), kNegInf);
  }
  {
    auto p = zero_params(d);
    p.at(Block::MuC, 1) = 2.0;
    p.at(Block::Delta, 3) = 0.5;
    p.at(Block::Wday, 1, 1) = -0.25;
    EXPECT_DOUBLE_EQ(category_utility(p.view(), 0, 1, 0.0, 3, 1, w, x), 0.75);
    EXPECT_THROW(category_utility(p.view(), 0, 1, 0.0, 4, 1, w, x), ConfigError);
  }
}

TEST(CategoryPurchaseProb, SpecExamples) {
  EXPECT_DOUBLE_EQ(category_purchase_prob(0.0), 0.5);
  EXPECT_EQ(category_purchase_prob(kNegInf), 0.0);
  EXPECT_NEAR(category_purchase_prob(std::log(3.0)), 0.75, 1e-15);
}

TEST(UnconditionalProbs, ProductRuleAndSimplex) {
  std::vector<double> cond = {0.5, 0.5};
  std::vector<double> out(3);
  unconditional_item_probs(0.5, cond, out);
  EXPECT_NEAR(out[0], 0.25, 1e-15);
  EXPECT_NEAR(out[1], 0.25, 1e-15);
  EXPECT_NEAR(out[2], 0.50, 1e-15);
  unconditional_item_probs(0.0, cond, out);
  EXPECT_EQ(out[0], 0.0);
  EXPECT_EQ(out[2], 1.0);
}

// Property sweep: simplex, IIA, translation invariance, availability
// monotonicity, and stability over random utility vectors.
TEST(KernelProperties, RandomizedSweep) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u_dist(-700.0, 700.0);
  std::uniform_int_distribution<int> n_dist(2, 9);
  std::uniform_real_distribution<double> shift_dist(-5.0, 5.0);
  for (int rep = 0; rep < 20000; ++rep) {
    const int n = n_dist(rng);
    std::vector<double> u(n);
    std::vector<std::uint8_t> avail(n, 0);
    for (int i = 0; i < n; ++i) u[i] = u_dist(rng);
    int n_avail = 0;
    for (int i = 0; i < n; ++i) {
      avail[i] = rng() % 4 != 0;
      n_avail += avail[i];
    }
    if (n_avail == 0) {
      avail[static_cast<int>(rng() % n)] = 1;
      n_avail = 1;
    }
    std::vector<double> p(n);
    conditional_choice_probs(u, avail, p);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      ASSERT_TRUE(std::isfinite(p[i]));
      ASSERT_GE(p[i], 0.0);
      total += p[i];
    }
    ASSERT_NEAR(total, 1.0, 1e-12);

    // IIA: restrict to a random available subset and compare renormalization
    // against direct evaluation on the subset.
    std::vector<std::uint8_t> sub(avail);
    int n_sub = 0;
    for (int i = 0; i < n; ++i) {
      if (sub[i] && rng() % 2 == 0) sub[i] = 0;
      n_sub += sub[i];
    }
    if (n_sub > 0) {
      std::vector<double> p_sub(n);
      conditional_choice_probs(u, sub, p_sub);
      double mass = 0.0;
      for (int i = 0; i < n; ++i)
        if (sub[i]) mass += p[i];
      if (mass > 1e-290) {
        for (int i = 0; i < n; ++i) {
          if (!sub[i]) continue;
          ASSERT_NEAR(p[i] / mass, p_sub[i], 1e-12);
          // Monotonicity: dropping items never lowers a survivor's share.
          ASSERT_GE(p_sub[i], p[i] - 1e-15);
        }
      }
    }

    // Translation: probabilities unchanged, IV shifts by the constant.
    const double shift = shift_dist(rng);
    std::vector<double> u_shift(u);
    for (double& v : u_shift) v += shift;
    std::vector<double> p_shift(n);
    conditional_choice_probs(u_shift, avail, p_shift);
    const double iv = inclusive_value(u, avail);
    const double iv_shift = inclusive_value(u_shift, avail);
    ASSERT_TRUE(std::isfinite(iv));
    ASSERT_NEAR(iv_shift - iv, shift, 1e-9 * std::max(1.0, std::abs(iv)));
    for (int i = 0; i < n; ++i) ASSERT_NEAR(p[i], p_shift[i], 1e-12);
  }
}

// The closed forms match a brute-force simulation of the generative story:
// draw EV1 shocks, buy in the category when u_c + e1 > e0, then take the
// max-utility available item.
TEST(KernelMonteCarlo, MatchesGenerativeProcess) {
  Dims d;
  d.N = 1;
  d.J = 3;
  d.C = 1;
  d.T = 1;
  d.K = 2;
  d.M = 1;
  d.P = 1;
  d.Q = 0;
  d.R = 1;
  ParamVector pv(d);
  auto rng0 = make_rng(5, rng_stream::kInit);
  std::normal_distribution<double> nd(0.0, 0.7);
  for (double& v : pv.values) v = nd(rng0);
  std::vector<double> w = {1.0};
  std::vector<double> x = {};

  const std::vector<double> prices = {1.25, 2.0, 3.5};
  std::vector<double> u(3);
  for (int j = 0; j < 3; ++j) u[j] = upc_utility(pv.view(), 0, j, prices[j], w, x);
  std::vector<std::uint8_t> avail = {1, 1, 1};
  std::vector<double> cond(3);
  conditional_choice_probs(u, avail, cond);
  const double iv = inclusive_value(u, avail);
  const double u_c = category_utility(pv.view(), 0, 0, iv, 0, 0, w, x);
  const double p_cat = category_purchase_prob(u_c);
  std::vector<double> closed(4);
  unconditional_item_probs(p_cat, cond, closed);

  const int n_draws = 1000000;
  auto rng = make_rng(5, rng_stream::kSample);
  std::uniform_real_distribution<double> unif(1e-12, 1.0);
  auto gumbel = [&]() { return -std::log(-std::log(unif(rng))); };
  std::vector<long long> hits(4, 0);
  for (int s = 0; s < n_draws; ++s) {
    const bool buy = u_c + gumbel() > gumbel();
    if (!buy) {
      ++hits[3];
      continue;
    }
    int best = -1;
    double best_v = -1e300;
    for (int j = 0; j < 3; ++j) {
      const double v = u[j] + gumbel();
      if (v > best_v) {
        best_v = v;
        best = j;
      }
    }
    ++hits[best];
  }
  for (int k = 0; k < 4; ++k) {
    const double mc = static_cast<double>(hits[k]) / n_draws;
    const double se = std::sqrt(std::max(closed[k] * (1.0 - closed[k]), 1e-12) / n_draws);
    EXPECT_NEAR(mc, closed[k], 3.0 * se) << "outcome " << k;
  }
}
