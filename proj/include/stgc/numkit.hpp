#pragma once

// Dense fp64 numerics shared by every other module. Everything here is a pure
// function of its inputs; reductions run sequentially in index order so that
// results are bit-reproducible.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace stgc {

using Vec = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }

  void fill(double v);
  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// xoshiro256** seeded through splitmix64.
///
/// The state is four 64-bit words s[0..3], filled by iterating
/// splitmix64 (x += 0x9E3779B97F4A7C15; z = x; z = (z ^ z>>30) *
/// 0xBF58476D1CE4E5B9; z = (z ^ z>>27) * 0x94D049BB133111EB; z ^= z>>31).
/// Each draw returns rotl(s1 * 5, 7) * 9 and then advances
/// t = s1<<17; s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3; s2 ^= t; s3 = rotl(s3, 45).
/// Doubles take the top 53 bits; normals use Box-Muller with the cosine
/// branch only, so every normal consumes exactly two draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  /// Uniform integer in [0, bound), rejection-sampled.
  std::uint64_t below(std::uint64_t bound);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
};

/// Derives an independent child seed; used to split streams by purpose.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

Matrix matmul(const Matrix& a, const Matrix& b);
/// a^T * b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a * b^T.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

Vec softmax(std::span<const double> z);
double log_sum_exp(std::span<const double> z);

struct CosineResult {
  double value = 0.0;
  bool zero_norm = false;
};

inline constexpr double kZeroNormEps = 1e-12;

/// u.v / (|u||v|); 0 with zero_norm set when either norm is below 1e-12.
CosineResult cosine(std::span<const double> u, std::span<const double> v);
inline double cosine_sim(std::span<const double> u, std::span<const double> v) {
  return cosine(u, v).value;
}

double dot(std::span<const double> u, std::span<const double> v);
double norm2(std::span<const double> u);

/// Sample Pearson correlation. Throws ErrorKind::Degenerate when either
/// input has zero variance.
double pearson(std::span<const double> x, std::span<const double> y);

double mean(std::span<const double> x);
/// Population standard deviation.
double stddev(std::span<const double> x);

/// Indices of the k largest entries, in descending value order; equal values
/// resolve toward the lower index.
std::vector<std::size_t> argtopk(std::span<const double> x, std::size_t k);

double gelu(double x);
double gelu_grad(double x);

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormRow {
  double mean = 0.0;
  double inv_std = 0.0;
};

/// Normalizes `x` into `xhat` and returns the statistics needed for backward.
LayerNormRow layer_norm(std::span<const double> x, std::span<double> xhat);

}  // namespace stgc
