#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "stgc/numkit.hpp"
#include "stgc/routing.hpp"

namespace stgc {

struct LossBreakdown {
  double main = 0.0;
  double aux = 0.0;  // averaged over MoE layers
  double cel = 0.0;
  double total = 0.0;
};

struct MainLoss {
  double value = 0.0;
  Matrix logit_grads;  // (softmax - onehot) / N
};

/// Mean per-token cross-entropy.
MainLoss main_loss(const Matrix& logits, std::span<const std::uint32_t> labels);

/// Routing logits of one flagged assignment and the expert it currently uses.
struct FlaggedLogits {
  Vec logits;
  std::size_t expert_id = 0;
};

/// Conflict elimination, cross-entropy form: for each flagged entry,
/// -log softmax(-z)[id], summed and divided by (N_all * E). Minimizing it
/// pushes the current expert's original score down. `literal_sign` flips the
/// sign of every term. When `logit_grads` is given it receives dL/dz per entry.
double cel_ce(std::span<const FlaggedLogits> flagged, std::size_t num_experts,
              std::vector<Vec>* logit_grads = nullptr, bool literal_sign = false);

/// Conflict elimination, score form: mean over flagged entries of softmax(z)[id].
double cel_mse(std::span<const FlaggedLogits> flagged, std::size_t num_experts,
               std::vector<Vec>* logit_grads = nullptr);

struct AuxLoss {
  double value = 0.0;
  Vec fractions;    // F_i, assignments / (N k)
  Vec mean_scores;  // P_i
  Matrix logit_grads;  // N x E, through P only
};

/// E * sum_i F_i P_i for one layer.
AuxLoss aux_loss(std::span<const RoutingDecision> decisions, std::size_t num_experts);

double total_loss(double main, double aux, double cel, double alpha, double beta);

}  // namespace stgc
