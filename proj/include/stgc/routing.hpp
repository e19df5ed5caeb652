#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "stgc/numkit.hpp"

namespace stgc {

struct RoutingDecision {
  Vec scores;                           // full softmax over E logits
  std::vector<std::size_t> topk_ids;    // descending score
  Vec topk_weights;                     // softmax over the selected logits
  std::vector<bool> dropped;            // per assignment, set by capacity limiting
};

/// Routes one token: full softmax, top-k (ties toward the lower index), and
/// mixing weights renormalized over the selected logits.
RoutingDecision route(std::span<const double> logits, std::size_t k);

inline constexpr double kUnlimitedCapacity = std::numeric_limits<double>::infinity();

struct CapacityPolicy {
  double capacity_factor = kUnlimitedCapacity;
  bool bpr = false;

  bool unlimited() const { return capacity_factor == kUnlimitedCapacity; }
};

/// ceil(capacity_factor * N * k / E).
std::size_t expert_capacity(const CapacityPolicy& policy, std::size_t num_tokens,
                            std::size_t k, std::size_t num_experts);

struct CapacityStats {
  std::size_t capacity = 0;
  std::vector<std::size_t> admitted;  // per expert
  std::vector<std::size_t> dropped;   // per expert
};

/// Marks assignments beyond each expert's capacity as dropped. Without BPR
/// an expert admits its assignments in batch order; with BPR it admits them
/// in descending order of the token's score for that expert, ties resolved
/// by batch position. Surviving weights are left as they are.
CapacityStats apply_capacity(std::vector<RoutingDecision>& decisions, const CapacityPolicy& policy,
                             std::size_t num_experts);

}  // namespace stgc
