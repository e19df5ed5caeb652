#pragma once

// Statistics about token gradients inside experts: consistency, similarity
// histograms, proxy validity, feature/gradient correlation, load, and the
// two-objective descent check.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "stgc/conflict.hpp"
#include "stgc/losses.hpp"
#include "stgc/model.hpp"
#include "stgc/numkit.hpp"
#include "stgc/token_grad.hpp"

namespace stgc {

/// g1 ‖ g2 as one vector.
Vec concat_gradient(const TokenGradRecord& r);

struct ExpertConsistency {
  std::size_t layer_index;
  std::size_t expert_id;
  std::size_t tokens;
  double sim;
};

struct ConsistencyStats {
  double mean = 0.0;
  double std = 0.0;
  std::vector<ExpertConsistency> experts;  // eligible experts only
  Vec per_layer;                           // token-weighted; NaN when a layer has none
};

/// Mean pairwise cosine of a set of vectors, off-diagonal unless
/// `include_diagonal`. Needs at least two vectors.
double mean_pairwise_cosine(std::span<const Vec> vectors, bool include_diagonal = false);

/// sim_i per (layer, expert) with >= 2 non-zero gradients, then mean and
/// population std across those experts. Throws Degenerate if none qualify.
ConsistencyStats gradient_consistency(std::span<const TokenGradRecord> records,
                                      std::size_t num_layers, bool include_diagonal = false);

struct Histogram {
  double lo = -1.0;
  double width = 0.05;
  std::vector<std::size_t> counts;
  Vec frequencies;
  std::size_t total = 0;
};

/// Fixed 0.05-wide bins over [-1, 1]; values outside are clamped and 1.0
/// lands in the top bin.
Histogram similarity_histogram(std::span<const double> similarities);

/// s_n for every record from a conflict report, in report order.
Vec similarities(const ConflictReport& report);

inline constexpr std::size_t kProxyMaxWeightElems = std::size_t{1} << 16;

struct ProxyValidation {
  std::size_t records = 0;
  double pearson = 0.0;          // s_n (bias grads) vs s_n^w (weight grads)
  double permuted_pearson = 0.0;  // same, with s_n^w shuffled
  Vec bias_similarity;
  Vec weight_similarity;
};

/// Weight-gradient analogue of token_similarity over the gw1/gw2 fields.
Vec weight_similarities(std::span<const TokenGradRecord> records);

ProxyValidation proxy_validation(const Parameters& p, const ModelConfig& cfg,
                                 const ForwardTrace& trace, const Matrix& logit_grads,
                                 std::uint64_t permutation_seed);

struct FeatureGradCorrelation {
  double pearson = 0.0;
  std::size_t pairs = 0;
  std::size_t groups = 0;
};

/// Pearson between flattened off-diagonal feature-cosine and gradient-cosine
/// matrices of one token set.
FeatureGradCorrelation pairwise_feature_gradient(std::span<const Vec> features,
                                                 std::span<const Vec> gradients);

/// Same, pooled over every (layer, expert) group; a token's feature is its
/// router input at that layer.
FeatureGradCorrelation feature_gradient_correlation(const ForwardTrace& trace,
                                                    std::span<const TokenGradRecord> records);

struct LayerLoad {
  Vec fractions;
  Vec mean_scores;
  double aux = 0.0;
};

std::vector<LayerLoad> load_distribution(const ForwardTrace& trace, std::size_t num_experts);

enum class DescentVerdict { GuaranteedDecrease, BoundInconclusive };

const char* to_string(DescentVerdict v);

struct DescentCheck {
  DescentVerdict verdict;
  double cosine;
  double bracket;        // |g1|/|g2| + |g2|/|g1| + 2 cos
  double bound_decrease;  // t/2 * |g1||g2| * bracket, the guaranteed drop
};

/// Two-objective quadratic-bound check for a step of size t <= 1/L along
/// -(g1 + g2): a positive cosine guarantees a strict decrease.
DescentCheck descent_oracle(std::span<const double> g1, std::span<const double> g2,
                            double lipschitz, double step);

}  // namespace stgc
