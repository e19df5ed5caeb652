#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "stgc/numkit.hpp"
#include "stgc/token_grad.hpp"

namespace stgc {

struct GradientMeans {
  Vec g1_mean;
  Vec g2_mean;
};

/// Component-wise mean over one expert's records. Records whose g1 and g2
/// both have norm below 1e-12 carry no loss signal and are left out; returns
/// nothing when no record remains.
std::optional<GradientMeans> average_gradient(std::span<const TokenGradRecord* const> records);
std::optional<GradientMeans> average_gradient(std::span<const TokenGradRecord> records);

/// s_n = (cos(g1, g1_mean) + cos(g2, g2_mean)) / 2, zero-norm cosines count as 0.
double token_similarity(const TokenGradRecord& record, const GradientMeans& means);

bool is_zero_gradient(const TokenGradRecord& record);

struct TokenVerdict {
  std::size_t record_index = 0;  // into the records passed to identify_conflicting
  std::size_t token_index = 0;
  double similarity = 0.0;
  bool zero_gradient = false;
  bool conflicting = false;
};

struct ExpertConflict {
  std::size_t layer_index = 0;
  std::size_t expert_id = 0;
  GradientMeans means;
  std::vector<TokenVerdict> tokens;
};

struct FlaggedAssignment {
  std::size_t token_index;
  std::size_t layer_index;
  std::size_t expert_id;
};

struct ConflictReport {
  double tau = 0.0;
  std::vector<ExpertConflict> experts;  // ordered by (layer, expert)
  std::vector<FlaggedAssignment> flagged;
  std::size_t num_conflicting = 0;  // N_all
  std::size_t num_records = 0;
  double conflicting_ratio = 0.0;
  Vec per_layer_ratio;
  std::vector<std::size_t> per_layer_records;
  std::vector<std::size_t> per_layer_conflicting;
};

/// Groups records by (layer, expert), averages, scores each token, and flags
/// s_n < tau. Pure: parameters are never involved.
ConflictReport identify_conflicting(std::span<const TokenGradRecord> records, double tau,
                                    std::size_t num_layers);

/// Record indices grouped by (layer, expert), groups in (layer, expert) order.
struct RecordGroup {
  std::size_t layer_index;
  std::size_t expert_id;
  std::vector<std::size_t> indices;
};
std::vector<RecordGroup> group_records(std::span<const TokenGradRecord> records);

}  // namespace stgc
