#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "stgc/error.hpp"
#include "stgc/losses.hpp"
#include "stgc/model.hpp"
#include "stgc/train.hpp"
#include "test_support.hpp"

namespace stgc {
namespace {

using testing::group_relative_errors;
using testing::numeric_gradient;
using testing::random_labels;
using testing::random_matrix;
using testing::small_config;

constexpr double kFdStep = 1e-5;
constexpr double kFdTolerance = 1e-4;

double probe_objective(const Parameters& p, const ModelConfig& cfg, const Matrix& x,
                       const std::vector<std::uint32_t>& labels, const std::vector<Matrix>& probes,
                       const CapacityPolicy& policy) {
  const ForwardTrace t = forward(p, cfg, x, policy);
  double v = main_loss(t.logits, labels).value;
  for (std::size_t l = 0; l < probes.size(); ++l) {
    const auto& z = t.layers[l].moe.logits.flat();
    for (std::size_t i = 0; i < z.size(); ++i) v += probes[l].flat()[i] * z[i];
  }
  return v;
}

void expect_gradients_match(std::uint64_t seed, const CapacityPolicy& policy) {
  const ModelConfig cfg = small_config();
  Model m = Model::create(cfg, seed);
  Rng rng(derive_seed(seed, 99));
  const std::size_t n = 7;
  const Matrix x = random_matrix(n, cfg.input_dim, rng);
  const auto labels = random_labels(n, cfg.num_classes, rng);
  std::vector<Matrix> probes;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) probes.push_back(random_matrix(n, cfg.num_experts, rng, 0.1));

  const ForwardTrace t = forward(m.params, cfg, x, policy);
  const MainLoss ml = main_loss(t.logits, labels);
  Parameters analytic = backward(m.params, cfg, t, ml.logit_grads, &probes);
  Parameters numeric = numeric_gradient(m.params, kFdStep, [&] {
    return probe_objective(m.params, cfg, x, labels, probes, policy);
  });
  for (const auto& [group, err] : group_relative_errors(analytic, numeric)) {
    EXPECT_LE(err, kFdTolerance) << "group " << group << " seed " << seed;
  }
}

TEST(ModelGradient, MatchesCentralDifferences) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) expect_gradients_match(seed, {});
}

TEST(ModelGradient, MatchesCentralDifferencesUnderCapacity) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) expect_gradients_match(seed, {0.5, seed % 2 == 0});
}

TEST(ModelGradient, FullTrainingObjectiveMatchesCentralDifferences) {
  ModelConfig cfg = small_config();
  cfg.alpha = 0.3;
  cfg.beta = 0.7;
  for (CelKind kind : {CelKind::CeLike, CelKind::MseLike}) {
    cfg.cel_kind = kind;
    Model m = Model::create(cfg, 21);
    Rng rng(5);
    Batch b{random_matrix(9, cfg.input_dim, rng), random_labels(9, cfg.num_classes, rng)};
    TrainConfig tc;
    StepOutcome out = compute_step(m.params, cfg, tc, b, true);
    ASSERT_TRUE(out.report);
    ASSERT_GT(out.report->num_conflicting, 0u);
    Parameters numeric = numeric_gradient(m.params, kFdStep, [&] {
      return compute_step(m.params, cfg, tc, b, true).loss.total;
    });
    for (const auto& [group, err] : group_relative_errors(out.grads, numeric)) {
      EXPECT_LE(err, kFdTolerance) << "group " << group << " cel " << to_string(kind);
    }
  }
}

TEST(ModelGradient, CaptureMatchesBatchBiasGradient) {
  const ModelConfig cfg = small_config();
  Model m = Model::create(cfg, 3);
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 3 + rng.below(10);
    const Matrix x = random_matrix(n, cfg.input_dim, rng);
    const auto labels = random_labels(n, cfg.num_classes, rng);
    const ForwardTrace t = forward(m.params, cfg, x);
    const MainLoss ml = main_loss(t.logits, labels);
    Parameters batch = backward(m.params, cfg, t, ml.logit_grads);
    Parameters summed = zeros_like(cfg);
    for (const auto& r : capture_token_bias_grads(m.params, cfg, t, ml.logit_grads)) {
      auto& e = summed.layers[r.layer_index].experts[r.expert_id];
      for (std::size_t i = 0; i < r.g1.size(); ++i) e.b1[i] += r.g1[i];
      for (std::size_t i = 0; i < r.g2.size(); ++i) e.b2[i] += r.g2[i];
    }
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      for (std::size_t e = 0; e < cfg.num_experts; ++e) {
        const auto& want = batch.layers[l].experts[e];
        const auto& got = summed.layers[l].experts[e];
        for (std::size_t i = 0; i < want.b1.size(); ++i) EXPECT_NEAR(got.b1[i], want.b1[i], 1e-10);
        for (std::size_t i = 0; i < want.b2.size(); ++i) EXPECT_NEAR(got.b2[i], want.b2[i], 1e-10);
      }
    }
  }
}

TEST(ModelGradient, CapturedWeightGradientsAreOuterProducts) {
  const ModelConfig cfg = small_config();
  Model m = Model::create(cfg, 4);
  Rng rng(2);
  const Matrix x = random_matrix(5, cfg.input_dim, rng);
  const auto labels = random_labels(5, cfg.num_classes, rng);
  const ForwardTrace t = forward(m.params, cfg, x);
  const MainLoss ml = main_loss(t.logits, labels);
  const auto records = capture_token_bias_grads(m.params, cfg, t, ml.logit_grads, true);
  Parameters batch = backward(m.params, cfg, t, ml.logit_grads);
  Parameters summed = zeros_like(cfg);
  for (const auto& r : records) {
    auto& e = summed.layers[r.layer_index].experts[r.expert_id];
    ASSERT_EQ(r.gw1.size(), e.w1.size());
    ASSERT_EQ(r.gw2.size(), e.w2.size());
    for (std::size_t i = 0; i < r.gw1.size(); ++i) e.w1.flat()[i] += r.gw1[i];
    for (std::size_t i = 0; i < r.gw2.size(); ++i) e.w2.flat()[i] += r.gw2[i];
  }
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    for (std::size_t e = 0; e < cfg.num_experts; ++e) {
      const auto& want = batch.layers[l].experts[e];
      const auto& got = summed.layers[l].experts[e];
      for (std::size_t i = 0; i < want.w1.size(); ++i) EXPECT_NEAR(got.w1.flat()[i], want.w1.flat()[i], 1e-10);
      for (std::size_t i = 0; i < want.w2.size(); ++i) EXPECT_NEAR(got.w2.flat()[i], want.w2.flat()[i], 1e-10);
    }
  }
}

TEST(Model, CaptureLeavesParametersUntouched) {
  const ModelConfig cfg = small_config();
  Model m = Model::create(cfg, 8);
  const auto before = checksum(m.params);
  Rng rng(1);
  const Matrix x = random_matrix(6, cfg.input_dim, rng);
  const ForwardTrace t = forward(m.params, cfg, x);
  const MainLoss ml = main_loss(t.logits, random_labels(6, cfg.num_classes, rng));
  (void)capture_token_bias_grads(m.params, cfg, t, ml.logit_grads, true);
  EXPECT_EQ(checksum(m.params), before);
}

TEST(Model, ForwardIsDeterministic) {
  const ModelConfig cfg = small_config();
  Model a = Model::create(cfg, 42);
  Model b = Model::create(cfg, 42);
  EXPECT_EQ(a.params, b.params);
  Rng rng(3);
  const Matrix x = random_matrix(4, cfg.input_dim, rng);
  EXPECT_EQ(forward(a.params, cfg, x).logits, forward(b.params, cfg, x).logits);
}

TEST(Model, DifferentSeedsGiveDifferentParameters) {
  const ModelConfig cfg = small_config();
  EXPECT_NE(checksum(Model::create(cfg, 1).params), checksum(Model::create(cfg, 2).params));
}

TEST(Model, RejectsMismatchedInput) {
  const ModelConfig cfg = small_config();
  Model m = Model::create(cfg, 1);
  EXPECT_THROW(forward(m.params, cfg, Matrix(3, cfg.input_dim + 1)), Error);
}

TEST(Model, RejectsInvalidConfig) {
  ModelConfig cfg = small_config();
  cfg.top_k = cfg.num_experts + 1;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = small_config();
  cfg.num_classes = 1;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(Model, NonFiniteActivationIsReported) {
  const ModelConfig cfg = small_config();
  Model m = Model::create(cfg, 1);
  Matrix x(2, cfg.input_dim);
  x(1, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    forward(m.params, cfg, x);
    FAIL() << "expected a numeric error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
  }
}

TEST(Model, TensorOrderCoversEveryParameter) {
  const ModelConfig cfg = small_config();
  Model m = Model::create(cfg, 1);
  std::size_t total = 0;
  for (const auto& t : tensors(m.params)) total += t.data.size();
  EXPECT_EQ(total, parameter_count(m.params));
  const std::size_t per_expert = 2 * cfg.hidden_size * cfg.intermediate_size + cfg.hidden_size + cfg.intermediate_size;
  const std::size_t per_layer = 2 * cfg.hidden_size + cfg.hidden_size * cfg.num_experts + cfg.num_experts * per_expert;
  EXPECT_EQ(total, cfg.input_dim * cfg.hidden_size + cfg.hidden_size + cfg.num_layers * per_layer +
                       cfg.hidden_size * cfg.num_classes + cfg.num_classes);
}

TEST(Model, ZeroExpertOutputMakesBlockIdentity) {
  const ModelConfig cfg = small_config();
  Model m = Model::create(cfg, 4);
  for (auto& layer : m.params.layers) {
    for (auto& ex : layer.experts) {
      ex.w2.fill(0.0);
      std::fill(ex.b2.begin(), ex.b2.end(), 0.0);
    }
  }
  Rng rng(2);
  const Matrix x = random_matrix(5, cfg.hidden_size, rng);
  EXPECT_EQ(block_forward(m.params, cfg, 0, x).x_out, x);
}

TEST(Model, SingleExpertMatchesDenseReference) {
  ModelConfig cfg = small_config();
  cfg.num_layers = 1;
  cfg.num_experts = 1;
  cfg.top_k = 1;
  Model m = Model::create(cfg, 6);
  Rng rng(7);
  const Matrix x = random_matrix(4, cfg.hidden_size, rng);
  const auto& layer = m.params.layers[0];
  const Expert& ex = layer.experts[0];
  const Matrix out = block_forward(m.params, cfg, 0, x).x_out;
  const std::size_t d = cfg.hidden_size, dp = cfg.intermediate_size;
  for (std::size_t n = 0; n < x.rows(); ++n) {
    double mu = 0.0, var = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += x(n, c) / d;
    for (std::size_t c = 0; c < d; ++c) var += (x(n, c) - mu) * (x(n, c) - mu) / d;
    Vec h(d), a(dp);
    for (std::size_t c = 0; c < d; ++c)
      h[c] = (x(n, c) - mu) / std::sqrt(var + 1e-5) * layer.ln_gain[c] + layer.ln_bias[c];
    for (std::size_t j = 0; j < dp; ++j) {
      double s = ex.b1[j];
      for (std::size_t c = 0; c < d; ++c) s += h[c] * ex.w1(c, j);
      a[j] = 0.5 * s * (1.0 + std::erf(s / std::sqrt(2.0)));
    }
    for (std::size_t c = 0; c < d; ++c) {
      double s = ex.b2[c];
      for (std::size_t j = 0; j < dp; ++j) s += a[j] * ex.w2(j, c);
      EXPECT_NEAR(out(n, c), x(n, c) + s, 1e-12);
    }
  }
}

TEST(Model, EqualExpertsGiveLogitIndependentOutput) {
  ModelConfig cfg = small_config();
  cfg.top_k = cfg.num_experts;
  Model m = Model::create(cfg, 9);
  for (auto& layer : m.params.layers)
    for (auto& ex : layer.experts) ex = layer.experts[0];
  Rng rng(10);
  const Matrix h = random_matrix(6, cfg.hidden_size, rng);
  const Matrix a = moe_forward(m.params.layers[0], cfg, h).outputs;
  m.params.layers[0].router_w = random_matrix(cfg.hidden_size, cfg.num_experts, rng, 5.0);
  const Matrix b = moe_forward(m.params.layers[0], cfg, h).outputs;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.flat()[i], b.flat()[i], 1e-12);

  // Identical experts leave the router nothing to learn from the main loss.
  const Matrix x = random_matrix(6, cfg.input_dim, rng);
  const ForwardTrace t = forward(m.params, cfg, x);
  const MainLoss ml = main_loss(t.logits, random_labels(6, cfg.num_classes, rng));
  const Parameters g = backward(m.params, cfg, t, ml.logit_grads);
  for (const auto& layer : g.layers)
    for (double v : layer.router_w.flat()) EXPECT_NEAR(v, 0.0, 1e-14);
}

TEST(Model, DistinctExpertsGiveRouterGradient) {
  ModelConfig cfg = small_config();
  cfg.top_k = cfg.num_experts;
  Model m = Model::create(cfg, 9);
  Rng rng(10);
  const Matrix x = random_matrix(6, cfg.input_dim, rng);
  const ForwardTrace t = forward(m.params, cfg, x);
  const MainLoss ml = main_loss(t.logits, random_labels(6, cfg.num_classes, rng));
  const Parameters g = backward(m.params, cfg, t, ml.logit_grads);
  double norm = 0.0;
  for (double v : g.layers[0].router_w.flat()) norm += v * v;
  EXPECT_GT(norm, 1e-12);
}

TEST(Model, ZeroLossGradientGivesZeroGradients) {
  const ModelConfig cfg = small_config();
  Model m = Model::create(cfg, 11);
  Rng rng(1);
  const Matrix x = random_matrix(5, cfg.input_dim, rng);
  const ForwardTrace t = forward(m.params, cfg, x);
  const Matrix zero(5, cfg.num_classes);
  Parameters g = backward(m.params, cfg, t, zero);
  for (const auto& tr : tensors(g))
    for (double v : tr.data) EXPECT_EQ(v, 0.0) << tr.name;
  for (const auto& r : capture_token_bias_grads(m.params, cfg, t, zero)) {
    for (double v : r.g1) EXPECT_EQ(v, 0.0);
    for (double v : r.g2) EXPECT_EQ(v, 0.0);
  }
}

// For a single layer the upstream delta at the block output is
// logit_grads * head_w^T, so g2 must equal mixing weight times that delta:
// linear in the weight with the delta held fixed.
TEST(Model, OutputBiasRecordScalesWithMixingWeight) {
  ModelConfig cfg = small_config();
  cfg.num_layers = 1;
  Model m = Model::create(cfg, 12);
  Rng rng(2);
  const Matrix x = random_matrix(4, cfg.input_dim, rng);
  const ForwardTrace t = forward(m.params, cfg, x);
  const MainLoss ml = main_loss(t.logits, random_labels(4, cfg.num_classes, rng));
  const Matrix delta = matmul_nt(ml.logit_grads, m.params.head_w);
  const auto records = capture_token_bias_grads(m.params, cfg, t, ml.logit_grads);
  ASSERT_EQ(records.size(), 4 * cfg.top_k);
  for (const auto& r : records) {
    const auto& d = t.layers[0].moe.decisions[r.token_index];
    const auto slot = std::find(d.topk_ids.begin(), d.topk_ids.end(), r.expert_id) - d.topk_ids.begin();
    const double w = d.topk_weights[slot];
    for (std::size_t c = 0; c < cfg.hidden_size; ++c)
      EXPECT_NEAR(r.g2[c], w * delta(r.token_index, c), 1e-14);
  }
}

// Values recorded from the first build; they guard against silent changes to
// initialization or the forward pass.
TEST(Model, GoldenForwardChecksum) {
  const ModelConfig cfg = small_config();
  const Model m = Model::create(cfg, 2024);
  Rng rng(2024);
  const Matrix x = random_matrix(8, cfg.input_dim, rng);
  const Matrix logits = forward(m.params, cfg, x).logits;
  double sum = 0.0, abs_sum = 0.0;
  for (double v : logits.flat()) {
    sum += v;
    abs_sum += std::abs(v);
  }
  EXPECT_EQ(checksum(m.params), 8989659178360144400ULL);
  EXPECT_NEAR(sum, 3.0139342456481, 1e-12);
  EXPECT_NEAR(abs_sum, 34.934590713584328, 1e-12);
}

}  // namespace
}  // namespace stgc
