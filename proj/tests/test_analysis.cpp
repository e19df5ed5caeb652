#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "stgc/analysis.hpp"
#include "stgc/error.hpp"
#include "stgc/losses.hpp"
#include "stgc/model.hpp"
#include "test_support.hpp"

namespace stgc {
namespace {

TokenGradRecord rec(std::size_t token, std::size_t layer, std::size_t expert, Vec g1, Vec g2 = {}) {
  TokenGradRecord r;
  r.token_index = token;
  r.layer_index = layer;
  r.expert_id = expert;
  r.g1 = std::move(g1);
  r.g2 = std::move(g2);
  return r;
}

double brute_pairwise(const std::vector<Vec>& v) {
  double s = 0.0;
  std::size_t c = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    for (std::size_t j = 0; j < v.size(); ++j) {
      if (i == j) continue;
      double d = 0, a = 0, b = 0;
      for (std::size_t k = 0; k < v[i].size(); ++k) {
        d += v[i][k] * v[j][k];
        a += v[i][k] * v[i][k];
        b += v[j][k] * v[j][k];
      }
      s += d / std::sqrt(a * b);
      ++c;
    }
  }
  return s / c;
}

TEST(Consistency, IdenticalGradientsGiveOne) {
  std::vector<TokenGradRecord> r;
  for (std::size_t i = 0; i < 5; ++i) r.push_back(rec(i, 0, i % 2, {1.0 + i, 2.0 + 2.0 * i}, {0.5 + 0.5 * i}));
  const auto st = gradient_consistency(r, 1);
  EXPECT_NEAR(st.mean, 1.0, 1e-15);
  EXPECT_NEAR(st.std, 0.0, 1e-15);
}

TEST(Consistency, ThreeVectorHandValue) {
  const double h = 1.0 / std::sqrt(2.0);
  const std::vector<TokenGradRecord> r{rec(0, 0, 0, {1, 0}), rec(1, 0, 0, {0, 1}), rec(2, 0, 0, {h, h})};
  const auto st = gradient_consistency(r, 1);
  EXPECT_NEAR(st.mean, 0.4714, 1e-4);
  EXPECT_NEAR(st.mean, (0.0 + 2.0 * h) / 3.0, 1e-15);
  // With the diagonal the three self-similarities join the average.
  const auto diag = gradient_consistency(r, 1, true);
  EXPECT_NEAR(diag.mean, (6.0 * st.mean + 3.0) / 9.0, 1e-15);
}

TEST(Consistency, MatchesBruteForce) {
  Rng rng(1);
  for (std::size_t n : {2u, 3u, 10u, 64u}) {
    std::vector<Vec> v(n, Vec(7));
    for (auto& x : v)
      for (double& y : x) y = rng.normal();
    EXPECT_NEAR(mean_pairwise_cosine(v), brute_pairwise(v), 1e-12);
  }
}

TEST(Consistency, MeanAndStdAcrossExperts) {
  const std::vector<TokenGradRecord> r{rec(0, 0, 0, {1, 0}), rec(1, 0, 0, {1, 0}),   // sim 1
                                       rec(2, 0, 1, {1, 0}), rec(3, 0, 1, {-1, 0}),  // sim -1
                                       rec(4, 1, 0, {1, 0})};                        // ineligible
  const auto st = gradient_consistency(r, 2);
  EXPECT_EQ(st.experts.size(), 2u);
  EXPECT_NEAR(st.mean, 0.0, 1e-15);
  EXPECT_NEAR(st.std, 1.0, 1e-15);
  EXPECT_NEAR(st.per_layer[0], 0.0, 1e-15);
  EXPECT_TRUE(std::isnan(st.per_layer[1]));
}

TEST(Consistency, RescalingPerExpertChangesNothing) {
  Rng rng(2);
  std::vector<TokenGradRecord> r;
  for (std::size_t i = 0; i < 40; ++i) {
    Vec g1(4), g2(3);
    for (double& v : g1) v = rng.normal();
    for (double& v : g2) v = rng.normal();
    r.push_back(rec(i, rng.below(2), rng.below(3), g1, g2));
  }
  const auto a = gradient_consistency(r, 2);
  for (auto& x : r) {
    const double s = 1.0 + 10.0 * static_cast<double>(x.expert_id + 3 * x.layer_index);
    for (double& v : x.g1) v *= s;
    for (double& v : x.g2) v *= s;
  }
  const auto b = gradient_consistency(r, 2);
  EXPECT_NEAR(a.mean, b.mean, 1e-14);
  EXPECT_NEAR(a.std, b.std, 1e-14);
}

TEST(Consistency, NoEligibleExpertIsDegenerate) {
  const std::vector<TokenGradRecord> r{rec(0, 0, 0, {1, 0}), rec(1, 0, 1, {1, 0}), rec(2, 0, 2, {0, 0})};
  try {
    gradient_consistency(r, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Degenerate);
  }
}

TEST(Histogram, AllOnesInTopBin) {
  const Vec s(17, 1.0);
  const auto h = similarity_histogram(s);
  ASSERT_EQ(h.counts.size(), 40u);
  EXPECT_EQ(h.counts.back(), 17u);
  EXPECT_EQ(h.total, 17u);
  EXPECT_DOUBLE_EQ(h.frequencies.back(), 1.0);
}

TEST(Histogram, MatchesIndependentCounter) {
  Rng rng(3);
  Vec s(1000);
  for (double& v : s) v = 2.0 * rng.uniform() - 1.0;
  s[0] = -1.0;
  s[1] = 0.0;
  s[2] = 1.0;
  const auto h = similarity_histogram(s);
  std::vector<std::size_t> c(40, 0);
  for (double v : s) {
    // Bin i covers [-1 + 0.05 i, -1 + 0.05 (i + 1)); 1.0 joins the top bin.
    std::size_t i = 0;
    while (i < 39 && v >= -1.0 + 0.05 * static_cast<double>(i + 1)) ++i;
    ++c[i];
  }
  std::size_t total = 0;
  for (std::size_t i = 0; i < 40; ++i) {
    total += h.counts[i];
    EXPECT_NEAR(static_cast<double>(h.counts[i]), static_cast<double>(c[i]), 1.0) << "bin " << i;
  }
  EXPECT_EQ(total, 1000u);
}

TEST(Proxy, RankOneActivationsGivePerfectCorrelation) {
  ModelConfig cfg = testing::small_config();
  cfg.num_experts = 1;
  cfg.top_k = 1;
  cfg.num_layers = 1;
  const Model m = Model::create(cfg, 3);
  Rng rng(4);
  // Identical inputs give every token the same activations, so each weight
  // gradient is a fixed vector times the token's bias gradient.
  Matrix x(40, cfg.input_dim);
  const Matrix row = testing::random_matrix(1, cfg.input_dim, rng);
  for (std::size_t n = 0; n < x.rows(); ++n)
    for (std::size_t j = 0; j < cfg.input_dim; ++j) x(n, j) = row(0, j);
  const auto labels = testing::random_labels(40, cfg.num_classes, rng);
  const ForwardTrace t = forward(m.params, cfg, x);
  const MainLoss ml = main_loss(t.logits, labels);
  const auto pv = proxy_validation(m.params, cfg, t, ml.logit_grads, 1);
  EXPECT_NEAR(pv.pearson, 1.0, 1e-9);
  for (std::size_t i = 0; i < pv.bias_similarity.size(); ++i)
    EXPECT_NEAR(pv.bias_similarity[i], pv.weight_similarity[i], 1e-9);
}

TEST(Proxy, SizeGuard) {
  ModelConfig cfg = testing::small_config();
  cfg.hidden_size = 512;
  cfg.intermediate_size = 256;
  const Model m = Model::create(testing::small_config(), 1);
  EXPECT_THROW(proxy_validation(m.params, cfg, ForwardTrace{}, Matrix{}, 1), Error);
}

TEST(FeatureGrad, ProportionalGradientsGiveOne) {
  Rng rng(5);
  std::vector<Vec> f(12, Vec(6)), g(12);
  for (std::size_t i = 0; i < f.size(); ++i) {
    for (double& v : f[i]) v = rng.normal();
    g[i] = f[i];
    const double scale = 0.1 + rng.uniform();
    for (double& v : g[i]) v *= scale;
  }
  const auto r = pairwise_feature_gradient(f, g);
  EXPECT_NEAR(r.pearson, 1.0, 1e-12);
  EXPECT_EQ(r.pairs, 12u * 11u);
}

// Null band: independent features and gradients, N = 200, 100 seeds.
TEST(FeatureGrad, IndependentInputsStayInNullBand) {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    Rng rng(seed);
    std::vector<Vec> f(200, Vec(8)), g(200, Vec(8));
    for (auto& v : f)
      for (double& x : v) x = rng.normal();
    for (auto& v : g)
      for (double& x : v) x = rng.normal();
    const auto r = pairwise_feature_gradient(f, g);
    EXPECT_EQ(r.pairs, 200u * 199u);
    worst = std::max(worst, std::abs(r.pearson));
  }
  EXPECT_LT(worst, 0.15);
}

TEST(Load, FractionsSumToOnePerLayer) {
  const ModelConfig cfg = testing::small_config();
  const Model m = Model::create(cfg, 6);
  Rng rng(6);
  const ForwardTrace t = forward(m.params, cfg, testing::random_matrix(33, cfg.input_dim, rng));
  const auto load = load_distribution(t, cfg.num_experts);
  ASSERT_EQ(load.size(), cfg.num_layers);
  for (const auto& l : load) {
    double f = 0, p = 0;
    for (double v : l.fractions) f += v;
    for (double v : l.mean_scores) p += v;
    EXPECT_NEAR(f, 1.0, 1e-12);
    EXPECT_NEAR(p, 1.0, 1e-12);
    EXPECT_GE(l.aux, 0.0);
  }
}

TEST(Descent, HandQuadraticExample) {
  // L1 = |theta - (1,0)|^2 / 2, L2 = |theta - (1,1)|^2 / 2 at theta = 0.
  const Vec g1{-1, 0}, g2{-1, -1};
  const auto c = descent_oracle(g1, g2, 2.0, 0.5);
  EXPECT_NEAR(c.cosine, 0.707107, 1e-6);
  EXPECT_EQ(c.verdict, DescentVerdict::GuaranteedDecrease);
  auto loss = [](const Vec& th) {
    return 0.5 * ((th[0] - 1) * (th[0] - 1) + th[1] * th[1]) +
           0.5 * ((th[0] - 1) * (th[0] - 1) + (th[1] - 1) * (th[1] - 1));
  };
  EXPECT_DOUBLE_EQ(loss({0, 0}), 1.5);
  const Vec next{0.5 * 2.0, 0.5 * 1.0};
  EXPECT_DOUBLE_EQ(loss(next), 0.25);
  // The bound is tight for this pair.
  EXPECT_NEAR(c.bound_decrease, 1.25, 1e-12);
  EXPECT_GE(loss({0, 0}) - loss(next), c.bound_decrease - 1e-12);
}

TEST(Descent, ParallelGradients) {
  const Vec g{0.3, -2.0, 1.0};
  const auto c = descent_oracle(g, g, 1.0, 1.0);
  EXPECT_NEAR(c.cosine, 1.0, 1e-15);
  EXPECT_EQ(c.verdict, DescentVerdict::GuaranteedDecrease);
}

TEST(Descent, OpposingPairIsInconclusive) {
  const auto c = descent_oracle(Vec{1, 0}, Vec{-3, 0.1}, 1.0, 0.5);
  EXPECT_LT(c.cosine, 0.0);
  EXPECT_EQ(c.verdict, DescentVerdict::BoundInconclusive);
}

// |g1|/|g2| + |g2|/|g1| >= 2 and cos >= -1, so the bracket can never go
// negative and the bound always promises a non-increase.
TEST(Descent, BracketIsNeverNegative) {
  Rng rng(7);
  for (int t = 0; t < 10000; ++t) {
    Vec a(3), b(3);
    for (double& v : a) v = rng.normal(0.0, std::exp(rng.normal()));
    for (double& v : b) v = rng.normal(0.0, std::exp(rng.normal()));
    EXPECT_GE(descent_oracle(a, b, 1.0, 1.0).bracket, -1e-12);
  }
}

TEST(Descent, RejectsLargeStep) {
  EXPECT_THROW(descent_oracle(Vec{1}, Vec{1}, 2.0, 0.6), Error);
  EXPECT_THROW(descent_oracle(Vec{1}, Vec{1}, 0.0, 0.1), Error);
  EXPECT_THROW(descent_oracle(Vec{0}, Vec{1}, 1.0, 0.1), Error);
}

}  // namespace
}  // namespace stgc
