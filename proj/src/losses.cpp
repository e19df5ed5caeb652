#include "stgc/losses.hpp"

#include <cmath>
#include <string>

#include "stgc/error.hpp"

namespace stgc {

MainLoss main_loss(const Matrix& logits, std::span<const std::uint32_t> labels) {
  const std::size_t n_tok = logits.rows(), n_cls = logits.cols();
  require(labels.size() == n_tok, ErrorKind::Dimension, "main_loss: label count != token count");
  require(n_tok > 0, ErrorKind::InvalidArgument, "main_loss: empty batch");
  MainLoss out;
  out.logit_grads = Matrix(n_tok, n_cls);
  const double inv_n = 1.0 / static_cast<double>(n_tok);
  for (std::size_t n = 0; n < n_tok; ++n) {
    require(labels[n] < n_cls, ErrorKind::InvalidArgument,
            "main_loss: label " + std::to_string(labels[n]) + " out of range for " +
                std::to_string(n_cls) + " classes");
    const auto z = logits.row(n);
    out.value += log_sum_exp(z) - z[labels[n]];
    const Vec p = softmax(z);
    for (std::size_t c = 0; c < n_cls; ++c) {
      out.logit_grads(n, c) = (p[c] - (c == labels[n] ? 1.0 : 0.0)) * inv_n;
    }
  }
  out.value *= inv_n;
  return out;
}

namespace {

void check_ids(std::span<const FlaggedLogits> flagged, std::size_t num_experts) {
  for (const auto& f : flagged) {
    require(f.logits.size() == num_experts, ErrorKind::Dimension, "cel: logit width != E");
    require(f.expert_id < num_experts, ErrorKind::InvalidArgument,
            "cel: expert id " + std::to_string(f.expert_id) + " >= E=" + std::to_string(num_experts));
  }
}

}  // namespace

double cel_ce(std::span<const FlaggedLogits> flagged, std::size_t num_experts,
              std::vector<Vec>* logit_grads, bool literal_sign) {
  check_ids(flagged, num_experts);
  if (logit_grads) logit_grads->assign(flagged.size(), Vec(num_experts, 0.0));
  if (flagged.empty()) return 0.0;
  const double scale = (literal_sign ? -1.0 : 1.0) /
                       (static_cast<double>(flagged.size()) * static_cast<double>(num_experts));
  double total = 0.0;
  Vec inverted(num_experts);
  for (std::size_t f = 0; f < flagged.size(); ++f) {
    const auto& entry = flagged[f];
    for (std::size_t i = 0; i < num_experts; ++i) inverted[i] = -entry.logits[i];
    const double nll = log_sum_exp(inverted) - inverted[entry.expert_id];
    total += nll;
    if (logit_grads) {
      // d(-log p'_id)/dz' = p' - onehot, and z' = -z.
      const Vec pinv = softmax(inverted);
      auto& g = (*logit_grads)[f];
      for (std::size_t i = 0; i < num_experts; ++i) {
        g[i] = -(pinv[i] - (i == entry.expert_id ? 1.0 : 0.0)) * scale;
      }
    }
  }
  return total * scale;
}

double cel_mse(std::span<const FlaggedLogits> flagged, std::size_t num_experts,
               std::vector<Vec>* logit_grads) {
  check_ids(flagged, num_experts);
  if (logit_grads) logit_grads->assign(flagged.size(), Vec(num_experts, 0.0));
  if (flagged.empty()) return 0.0;
  // (1/(N_all E)) sum_n sum_i p_id collapses to the mean of p_id.
  const double scale = 1.0 / static_cast<double>(flagged.size());
  double total = 0.0;
  for (std::size_t f = 0; f < flagged.size(); ++f) {
    const auto& entry = flagged[f];
    const Vec p = softmax(entry.logits);
    const double pid = p[entry.expert_id];
    total += pid;
    if (logit_grads) {
      auto& g = (*logit_grads)[f];
      for (std::size_t i = 0; i < num_experts; ++i) {
        g[i] = pid * ((i == entry.expert_id ? 1.0 : 0.0) - p[i]) * scale;
      }
    }
  }
  return total * scale;
}

AuxLoss aux_loss(std::span<const RoutingDecision> decisions, std::size_t num_experts) {
  require(!decisions.empty(), ErrorKind::InvalidArgument, "aux_loss: empty batch");
  const std::size_t n_tok = decisions.size();
  const std::size_t k = decisions.front().topk_ids.size();
  AuxLoss out;
  out.fractions.assign(num_experts, 0.0);
  out.mean_scores.assign(num_experts, 0.0);
  for (const auto& d : decisions) {
    require(d.scores.size() == num_experts, ErrorKind::Dimension, "aux_loss: score width != E");
    for (std::size_t e : d.topk_ids) out.fractions[e] += 1.0;
    for (std::size_t e = 0; e < num_experts; ++e) out.mean_scores[e] += d.scores[e];
  }
  const double inv_nk = 1.0 / static_cast<double>(n_tok * k);
  const double inv_n = 1.0 / static_cast<double>(n_tok);
  const double e_count = static_cast<double>(num_experts);
  for (std::size_t e = 0; e < num_experts; ++e) {
    out.fractions[e] *= inv_nk;
    out.mean_scores[e] *= inv_n;
    out.value += out.fractions[e] * out.mean_scores[e];
  }
  out.value *= e_count;

  out.logit_grads = Matrix(n_tok, num_experts);
  for (std::size_t n = 0; n < n_tok; ++n) {
    const auto& p = decisions[n].scores;
    double pdp = 0.0;
    for (std::size_t e = 0; e < num_experts; ++e) pdp += p[e] * e_count * out.fractions[e] * inv_n;
    for (std::size_t e = 0; e < num_experts; ++e) {
      out.logit_grads(n, e) = p[e] * (e_count * out.fractions[e] * inv_n - pdp);
    }
  }
  return out;
}

double total_loss(double main, double aux, double cel, double alpha, double beta) {
  return main + alpha * aux + beta * cel;
}

}  // namespace stgc
