#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "stgc/error.hpp"
#include "stgc/numkit.hpp"
#include "test_support.hpp"

namespace stgc {
namespace {

using testing::random_matrix;

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
  }
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

TEST(Matmul, IdentityAndProjection) {
  Matrix id(2, 2, {1, 0, 0, 1});
  Matrix m(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(matmul(id, m), m);
  Matrix p(2, 2, {1, 0, 0, 0});
  Matrix v(2, 1, {5, 7});
  EXPECT_EQ(matmul(p, v), Matrix(2, 1, {5, 0}));
}

TEST(Matmul, BitEqualToTripleLoop) {
  Rng rng(3);
  for (std::size_t trial = 0; trial < 20; ++trial) {
    const std::size_t r = 1 + rng.below(32), k = 1 + rng.below(32), c = 1 + rng.below(32);
    Matrix a = random_matrix(r, k, rng), b = random_matrix(k, c, rng);
    EXPECT_EQ(matmul(a, b), naive_matmul(a, b));
    EXPECT_EQ(matmul_tn(transpose(a), b), naive_matmul(a, b));
    EXPECT_EQ(matmul_nt(a, transpose(b)), naive_matmul(a, b));
  }
}

TEST(Matmul, RejectsMismatch) {
  try {
    matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Dimension);
  }
}

TEST(Softmax, KnownValues) {
  for (double p : softmax(Vec{0, 0, 0, 0})) EXPECT_DOUBLE_EQ(p, 0.25);
  const Vec two = softmax(Vec{2, 1});
  EXPECT_NEAR(two[0], 0.731059, 1e-6);
  EXPECT_NEAR(two[1], 0.268941, 1e-6);
  const Vec big = softmax(Vec{1000, 0});
  EXPECT_TRUE(std::isfinite(big[0]) && std::isfinite(big[1]));
  EXPECT_NEAR(big[0], 1.0, 1e-15);
  EXPECT_NEAR(big[1], 0.0, 1e-15);
  EXPECT_THROW(softmax(Vec{}), Error);
}

TEST(Softmax, SumsToOneForLongInputs) {
  Rng rng(11);
  for (std::size_t n : {1u, 7u, 100u, 10000u}) {
    Vec z(n);
    for (double& v : z) v = rng.normal(0.0, 30.0);
    double s = 0.0;
    for (double p : softmax(z)) {
      EXPECT_GT(p, -1e-300);
      s += p;
    }
    EXPECT_NEAR(s, 1.0, 1e-12) << n;
  }
}

TEST(Cosine, KnownValues) {
  EXPECT_NEAR(cosine_sim(Vec{1, 2, 3}, Vec{1, 2, 3}), 1.0, 1e-15);
  EXPECT_EQ(cosine_sim(Vec{1, 0}, Vec{0, 1}), 0.0);
  EXPECT_NEAR(cosine_sim(Vec{1, 0}, Vec{0.5, 0.5}), 0.707107, 1e-6);
  const auto z = cosine(Vec{0, 0}, Vec{1, 1});
  EXPECT_TRUE(z.zero_norm);
  EXPECT_EQ(z.value, 0.0);
  EXPECT_THROW(cosine(Vec{1}, Vec{1, 2}), Error);
}

TEST(Cosine, SelfSimilarityIsOne) {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    Vec u(1 + rng.below(20));
    for (double& v : u) v = rng.normal();
    const double n = norm2(u);
    const double scale = 1e-6 / n * (1.0 + 10.0 * rng.uniform());
    for (double& v : u) v *= scale;
    EXPECT_NEAR(cosine_sim(u, u), 1.0, 1e-12);
  }
}

TEST(Pearson, KnownValues) {
  EXPECT_NEAR(pearson(Vec{1, 2, 3}, Vec{2, 4, 6}), 1.0, 1e-15);
  EXPECT_NEAR(pearson(Vec{1, 2, 3}, Vec{3, 2, 1}), -1.0, 1e-15);
  EXPECT_NEAR(pearson(Vec{1, 2, 3, 4}, Vec{1, 3, 2, 4}), 0.8, 1e-12);
}

TEST(Pearson, DegenerateVarianceIsDistinctError) {
  try {
    pearson(Vec{1, 1, 1}, Vec{1, 2, 3});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Degenerate);
  }
  EXPECT_THROW(pearson(Vec{1}, Vec{2}), Error);
}

TEST(Rng, GoldenStreamSeed42) {
  // Computed with an independent Python implementation of splitmix64 seeding
  // and xoshiro256**.
  const std::uint64_t golden[16] = {
      0x15780b2e0c2ec716ULL, 0x6104d9866d113a7eULL, 0xae17533239e499a1ULL, 0xecb8ad4703b360a1ULL,
      0xfde6dc7fe2ec5e64ULL, 0xc50da53101795238ULL, 0xb82154855a65ddb2ULL, 0xd99a2743ebe60087ULL,
      0xc2e96e726e97647eULL, 0x9556615f775fbc3dULL, 0xaeb53b340c103971ULL, 0x4a69db9873af8965ULL,
      0xcd0feda93006c6b6ULL, 0x52480865a4b42742ULL, 0xb60dec3bf2d887cdULL, 0xe0b55a68b96677faULL};
  Rng rng(42);
  for (std::uint64_t g : golden) EXPECT_EQ(rng.next_u64(), g);
}

TEST(Rng, UniformRangeAndBelow) {
  Rng rng(1);
  std::vector<int> hist(5, 0);
  for (int i = 0; i < 50000; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ++hist[rng.below(5)];
  }
  for (int c : hist) EXPECT_NEAR(c, 10000, 500);
  EXPECT_THROW(rng.below(0), Error);
}

TEST(Rng, NormalMoments) {
  Rng rng(9);
  Vec x(100000);
  for (double& v : x) v = rng.normal();
  EXPECT_NEAR(mean(x), 0.0, 0.02);
  EXPECT_NEAR(stddev(x), 1.0, 0.02);
}

TEST(Rng, DeriveSeedSplitsStreams) {
  EXPECT_EQ(derive_seed(7, 1), derive_seed(7, 1));
  EXPECT_NE(derive_seed(7, 1), derive_seed(7, 2));
  EXPECT_NE(derive_seed(7, 1), derive_seed(8, 1));
}

TEST(Argtopk, OrderAndTies) {
  EXPECT_EQ(argtopk(Vec{0, 0, 0, 0}, 2), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(argtopk(Vec{2, 1, 0, -1}, 2), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(argtopk(Vec{1, 3, 3, 2}, 3), (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_THROW(argtopk(Vec{1, 2}, 3), Error);
  EXPECT_THROW(argtopk(Vec{1, 2}, 0), Error);
}

TEST(Gelu, ErfFormAndDerivative) {
  for (double x : {-3.0, -1.0, -0.1, 0.0, 0.5, 2.0}) {
    EXPECT_NEAR(gelu(x), 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))), 1e-15);
    const double h = 1e-6;
    EXPECT_NEAR(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), 1e-8);
  }
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
  Vec x{1, 2, 3, 4, 10};
  Vec xhat(x.size());
  const auto st = layer_norm(x, xhat);
  EXPECT_NEAR(st.mean, 4.0, 1e-15);
  EXPECT_NEAR(mean(xhat), 0.0, 1e-15);
  const double var = 10.0;  // population variance of x
  EXPECT_NEAR(st.inv_std, 1.0 / std::sqrt(var + kLayerNormEps), 1e-15);
}

TEST(Stats, MeanAndPopulationStd) {
  EXPECT_DOUBLE_EQ(mean(Vec{1, 2, 3, 4}), 2.5);
  EXPECT_DOUBLE_EQ(stddev(Vec{2, 4, 4, 4, 5, 5, 7, 9}), 2.0);
  EXPECT_THROW(mean(Vec{}), Error);
}

}  // namespace
}  // namespace stgc
