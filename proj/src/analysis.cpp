#include "stgc/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "stgc/error.hpp"

namespace stgc {

Vec concat_gradient(const TokenGradRecord& r) {
  Vec out;
  out.reserve(r.g1.size() + r.g2.size());
  out.insert(out.end(), r.g1.begin(), r.g1.end());
  out.insert(out.end(), r.g2.begin(), r.g2.end());
  return out;
}

double mean_pairwise_cosine(std::span<const Vec> vectors, bool include_diagonal) {
  const std::size_t n = vectors.size();
  require(n >= 2, ErrorKind::InvalidArgument, "mean_pairwise_cosine: need at least 2 vectors");
  Vec norms(n);
  for (std::size_t i = 0; i < n; ++i) norms[i] = norm2(vectors[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (norms[i] < kZeroNormEps || norms[j] < kZeroNormEps) continue;
      sum += dot(vectors[i], vectors[j]) / (norms[i] * norms[j]);
    }
  }
  // The matrix is symmetric: each off-diagonal pair appears twice.
  double total = 2.0 * sum;
  double count = static_cast<double>(n * (n - 1));
  if (include_diagonal) {
    for (std::size_t i = 0; i < n; ++i) total += norms[i] < kZeroNormEps ? 0.0 : 1.0;
    count += static_cast<double>(n);
  }
  return total / count;
}

ConsistencyStats gradient_consistency(std::span<const TokenGradRecord> records,
                                      std::size_t num_layers, bool include_diagonal) {
  ConsistencyStats out;
  Vec layer_sum(num_layers, 0.0), layer_weight(num_layers, 0.0);
  for (const auto& group : group_records(records)) {
    std::vector<Vec> grads;
    for (std::size_t i : group.indices) {
      if (!is_zero_gradient(records[i])) grads.push_back(concat_gradient(records[i]));
    }
    if (grads.size() < 2) continue;
    const double sim = mean_pairwise_cosine(grads, include_diagonal);
    out.experts.push_back({group.layer_index, group.expert_id, grads.size(), sim});
    if (group.layer_index < num_layers) {
      layer_sum[group.layer_index] += sim * static_cast<double>(grads.size());
      layer_weight[group.layer_index] += static_cast<double>(grads.size());
    }
  }
  if (out.experts.empty()) {
    fail(ErrorKind::Degenerate, "gradient_consistency: no expert holds two or more tokens");
  }
  Vec sims;
  for (const auto& e : out.experts) sims.push_back(e.sim);
  out.mean = mean(sims);
  out.std = stddev(sims);
  out.per_layer.assign(num_layers, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t l = 0; l < num_layers; ++l) {
    if (layer_weight[l] > 0.0) out.per_layer[l] = layer_sum[l] / layer_weight[l];
  }
  return out;
}

Histogram similarity_histogram(std::span<const double> similarities) {
  Histogram h;
  const std::size_t bins = 40;
  h.counts.assign(bins, 0);
  for (double s : similarities) {
    const double clamped = std::clamp(s, -1.0, 1.0);
    auto bin = static_cast<std::size_t>(std::floor((clamped - h.lo) / h.width));
    ++h.counts[std::min(bin, bins - 1)];
  }
  h.total = similarities.size();
  h.frequencies.assign(bins, 0.0);
  if (h.total > 0) {
    for (std::size_t b = 0; b < bins; ++b) {
      h.frequencies[b] = static_cast<double>(h.counts[b]) / static_cast<double>(h.total);
    }
  }
  return h;
}

Vec similarities(const ConflictReport& report) {
  Vec out;
  for (const auto& ec : report.experts) {
    for (const auto& t : ec.tokens) {
      if (!t.zero_gradient) out.push_back(t.similarity);
    }
  }
  return out;
}

Vec weight_similarities(std::span<const TokenGradRecord> records) {
  Vec out(records.size(), 0.0);
  for (const auto& group : group_records(records)) {
    const auto& first = records[group.indices.front()];
    require(!first.gw1.empty() && !first.gw2.empty(), ErrorKind::InvalidArgument,
            "weight_similarities: records carry no weight gradients");
    Vec m1(first.gw1.size(), 0.0), m2(first.gw2.size(), 0.0);
    for (std::size_t i : group.indices) {
      for (std::size_t j = 0; j < m1.size(); ++j) m1[j] += records[i].gw1[j];
      for (std::size_t j = 0; j < m2.size(); ++j) m2[j] += records[i].gw2[j];
    }
    const double inv = 1.0 / static_cast<double>(group.indices.size());
    for (auto& v : m1) v *= inv;
    for (auto& v : m2) v *= inv;
    for (std::size_t i : group.indices) {
      out[i] = 0.5 * (cosine(records[i].gw1, m1).value + cosine(records[i].gw2, m2).value);
    }
  }
  return out;
}

ProxyValidation proxy_validation(const Parameters& p, const ModelConfig& cfg,
                                 const ForwardTrace& trace, const Matrix& logit_grads,
                                 std::uint64_t permutation_seed) {
  require(cfg.hidden_size * cfg.intermediate_size <= kProxyMaxWeightElems, ErrorKind::InvalidArgument,
          "proxy_validation: D*D' = " + std::to_string(cfg.hidden_size * cfg.intermediate_size) +
              " exceeds the 65536-element guard");
  const auto records = capture_token_bias_grads(p, cfg, trace, logit_grads, /*with_weights=*/true);
  ProxyValidation out;
  out.records = records.size();

  // Same grouping and means as conflict identification, minus zero records.
  const auto groups = group_records(records);
  Vec s_bias(records.size(), 0.0);
  std::vector<bool> keep(records.size(), false);
  for (const auto& g : groups) {
    std::vector<const TokenGradRecord*> members;
    for (std::size_t i : g.indices) members.push_back(&records[i]);
    const auto means = average_gradient(std::span<const TokenGradRecord* const>(members));
    if (!means) continue;
    for (std::size_t i : g.indices) {
      if (is_zero_gradient(records[i])) continue;
      s_bias[i] = token_similarity(records[i], *means);
      keep[i] = true;
    }
  }
  const Vec s_weight_all = weight_similarities(records);
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!keep[i]) continue;
    out.bias_similarity.push_back(s_bias[i]);
    out.weight_similarity.push_back(s_weight_all[i]);
  }
  out.pearson = pearson(out.bias_similarity, out.weight_similarity);
  Vec shuffled = out.weight_similarity;
  Rng rng(permutation_seed);
  rng.shuffle(shuffled);
  out.permuted_pearson = pearson(out.bias_similarity, shuffled);
  return out;
}

FeatureGradCorrelation pairwise_feature_gradient(std::span<const Vec> features,
                                                 std::span<const Vec> gradients) {
  require(features.size() == gradients.size(), ErrorKind::Dimension,
          "feature/gradient count mismatch");
  require(features.size() >= 2, ErrorKind::InvalidArgument, "need at least 2 tokens");
  Vec fs, gs;
  const std::size_t n = features.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      fs.push_back(cosine(features[i], features[j]).value);
      gs.push_back(cosine(gradients[i], gradients[j]).value);
    }
  }
  return {pearson(fs, gs), fs.size(), 1};
}

FeatureGradCorrelation feature_gradient_correlation(const ForwardTrace& trace,
                                                    std::span<const TokenGradRecord> records) {
  Vec fs, gs;
  std::size_t groups = 0;
  for (const auto& g : group_records(records)) {
    if (g.indices.size() < 2) continue;
    require(g.layer_index < trace.layers.size(), ErrorKind::Dimension,
            "feature_gradient_correlation: record layer outside trace");
    const Matrix& h = trace.layers[g.layer_index].h;
    std::vector<Vec> grads;
    for (std::size_t i : g.indices) grads.push_back(concat_gradient(records[i]));
    for (std::size_t a = 0; a < g.indices.size(); ++a) {
      for (std::size_t b = 0; b < g.indices.size(); ++b) {
        if (a == b) continue;
        fs.push_back(cosine(h.row(records[g.indices[a]].token_index),
                            h.row(records[g.indices[b]].token_index)).value);
        gs.push_back(cosine(grads[a], grads[b]).value);
      }
    }
    ++groups;
  }
  require(groups > 0, ErrorKind::Degenerate,
          "feature_gradient_correlation: no expert holds two or more tokens");
  return {pearson(fs, gs), fs.size(), groups};
}

std::vector<LayerLoad> load_distribution(const ForwardTrace& trace, std::size_t num_experts) {
  std::vector<LayerLoad> out;
  for (const auto& lt : trace.layers) {
    const auto aux = aux_loss(lt.moe.decisions, num_experts);
    out.push_back({aux.fractions, aux.mean_scores, aux.value});
  }
  return out;
}

const char* to_string(DescentVerdict v) {
  return v == DescentVerdict::GuaranteedDecrease ? "guaranteed_decrease" : "bound_inconclusive";
}

DescentCheck descent_oracle(std::span<const double> g1, std::span<const double> g2,
                            double lipschitz, double step) {
  require(lipschitz > 0.0, ErrorKind::InvalidArgument, "descent_oracle: Lipschitz constant must be > 0");
  require(step > 0.0 && step * lipschitz <= 1.0, ErrorKind::InvalidArgument,
          "descent_oracle: step must satisfy 0 < t <= 1/L");
  const double n1 = norm2(g1), n2 = norm2(g2);
  require(n1 >= kZeroNormEps && n2 >= kZeroNormEps, ErrorKind::Degenerate,
          "descent_oracle: zero gradient");
  DescentCheck c;
  c.cosine = dot(g1, g2) / (n1 * n2);
  c.bracket = n1 / n2 + n2 / n1 + 2.0 * c.cosine;
  c.bound_decrease = 0.5 * step * n1 * n2 * c.bracket;
  c.verdict = c.cosine > 0.0 ? DescentVerdict::GuaranteedDecrease : DescentVerdict::BoundInconclusive;
  return c;
}

}  // namespace stgc
