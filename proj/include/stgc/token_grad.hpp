#pragma once

#include <cstddef>

#include "stgc/numkit.hpp"

namespace stgc {

/// Gradient one token's main-loss term produces on one expert's biases.
/// g1 matches b1 (intermediate size), g2 matches b2 (hidden size). One record
/// is emitted per admitted (token, layer, expert) assignment.
struct TokenGradRecord {
  std::size_t token_index = 0;
  std::size_t layer_index = 0;
  std::size_t expert_id = 0;
  Vec g1;
  Vec g2;
  // Full per-token weight gradients, row-major, only filled in validation
  // captures (w1 is D x D', w2 is D' x D).
  Vec gw1;
  Vec gw2;
};

}  // namespace stgc
