#include "stgc/routing.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "stgc/error.hpp"

namespace stgc {

RoutingDecision route(std::span<const double> logits, std::size_t k) {
  RoutingDecision d;
  d.scores = softmax(logits);
  d.topk_ids = argtopk(logits, k);
  Vec selected(k);
  for (std::size_t j = 0; j < k; ++j) selected[j] = logits[d.topk_ids[j]];
  d.topk_weights = softmax(selected);
  d.dropped.assign(k, false);
  return d;
}

std::size_t expert_capacity(const CapacityPolicy& policy, std::size_t num_tokens, std::size_t k,
                            std::size_t num_experts) {
  require(policy.capacity_factor > 0.0, ErrorKind::InvalidArgument,
          "capacity_factor must be > 0, got " + std::to_string(policy.capacity_factor));
  require(num_experts > 0, ErrorKind::InvalidArgument, "num_experts must be > 0");
  if (policy.unlimited()) return num_tokens * k;
  const double raw = policy.capacity_factor * static_cast<double>(num_tokens * k) /
                     static_cast<double>(num_experts);
  return static_cast<std::size_t>(std::ceil(raw));
}

CapacityStats apply_capacity(std::vector<RoutingDecision>& decisions, const CapacityPolicy& policy,
                             std::size_t num_experts) {
  CapacityStats stats;
  stats.admitted.assign(num_experts, 0);
  stats.dropped.assign(num_experts, 0);
  const std::size_t k = decisions.empty() ? 1 : decisions.front().topk_ids.size();
  stats.capacity = expert_capacity(policy, decisions.size(), k, num_experts);

  struct Slot {
    std::size_t token;
    std::size_t slot;
    double score;
  };
  std::vector<std::vector<Slot>> queues(num_experts);
  for (std::size_t n = 0; n < decisions.size(); ++n) {
    const auto& d = decisions[n];
    for (std::size_t j = 0; j < d.topk_ids.size(); ++j) {
      const std::size_t e = d.topk_ids[j];
      require(e < num_experts, ErrorKind::InvalidArgument, "apply_capacity: expert id out of range");
      queues[e].push_back({n, j, d.scores[e]});
    }
  }

  for (std::size_t e = 0; e < num_experts; ++e) {
    auto& q = queues[e];
    if (policy.bpr) {
      std::stable_sort(q.begin(), q.end(), [](const Slot& a, const Slot& b) { return a.score > b.score; });
    }
    for (std::size_t i = 0; i < q.size(); ++i) {
      const bool admit = i < stats.capacity;
      decisions[q[i].token].dropped[q[i].slot] = !admit;
      ++(admit ? stats.admitted[e] : stats.dropped[e]);
    }
  }
  return stats;
}

}  // namespace stgc
