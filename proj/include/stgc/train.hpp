#pragma once

// Two-phase STGC training step and the experiment loop around it.
//
// Phase 1 reuses the step's forward trace, back-propagates the main loss
// only far enough to collect per-token expert bias gradients, and flags
// conflicting assignments. Parameters are not touched.
// Phase 2 adds alpha * aux + beta * CEL on the same trace, runs the full
// backward pass, and applies the optimizer.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "stgc/conflict.hpp"
#include "stgc/losses.hpp"
#include "stgc/metrics.hpp"
#include "stgc/model.hpp"
#include "stgc/synthdata.hpp"

namespace stgc {

enum class OptimizerKind { Sgd, Adam };

const char* to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 128;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool cosine_decay = false;
  std::uint64_t seed = 7;
  bool stgc_enabled = true;
  bool verify_mode = false;  // only beta * CEL drives the update
  std::size_t grad_accum = 1;
  std::size_t stats_stride = 10;  // gradient-consistency cadence
  std::size_t eval_stride = 100;
  double val_fraction = 0.2;
  bool capacity_in_training = false;
  bool cel_literal_sign = false;
  bool consistency_include_diagonal = false;
  bool pool_accum_stats = false;
  bool per_layer_consistency = false;

  void validate() const;
};

struct OptimizerState {
  std::optional<Parameters> m;
  std::optional<Parameters> v;
  std::size_t step = 0;
};

void optimizer_step(Parameters& params, Parameters& grads, OptimizerState& state,
                    const TrainConfig& cfg, double lr);

double learning_rate(const TrainConfig& cfg, std::size_t step);

struct Batch {
  Matrix features;
  std::vector<std::uint32_t> labels;
};

/// Router-logit losses computed on a trace: per-layer aux, pooled CEL, and
/// their logit gradients already scaled by the weights that drive the update.
struct RouterLossTerms {
  double aux = 0.0;
  double cel = 0.0;
  std::vector<Matrix> logit_grads;  // one N x E per layer
  std::vector<AuxLoss> per_layer_aux;
};

RouterLossTerms router_losses(const ForwardTrace& trace, const ModelConfig& cfg,
                              const ConflictReport* report, double aux_weight, double cel_weight,
                              bool cel_literal_sign);

struct StepOutcome {
  LossBreakdown loss;
  std::optional<ConflictReport> report;
  std::vector<TokenGradRecord> records;
  std::vector<AuxLoss> per_layer_aux;
  Parameters grads;
  double capture_ms = 0.0;
};

/// Forward, optional phase 1, losses and full backward for one micro-batch.
/// Does not update parameters.
StepOutcome compute_step(const Parameters& params, const ModelConfig& cfg, const TrainConfig& tc,
                         const Batch& batch, bool capture);

struct StepResult {
  LossBreakdown loss;
  MetricsSnapshot metrics;
};

/// One optimizer update over `micro_batches` (grad_accum entries).
StepResult train_step(Model& model, std::span<const Batch> micro_batches, const TrainConfig& tc,
                      OptimizerState& opt, std::size_t step_index, bool want_stats);

/// Seeded shuffling without replacement per epoch.
class BatchSampler {
 public:
  BatchSampler(const Dataset& data, std::size_t batch_size, std::uint64_t seed);
  Batch next();

 private:
  const Dataset& data_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

struct EvalReport {
  double accuracy = 0.0;
  std::vector<double> task_accuracy;
  std::vector<std::size_t> task_counts;
  bool capacity_limited = false;
  double capacity_factor = 0.0;
  bool bpr = false;
  std::size_t batch_size = 0;
  std::vector<std::size_t> batch_capacity;      // per evaluated batch
  std::vector<std::vector<std::size_t>> drops;  // [layer][expert], summed over batches
  std::vector<std::vector<std::size_t>> max_admitted;  // [layer][expert], worst batch
};

EvalReport evaluate(const Model& model, const Dataset& data, const CapacityPolicy& policy,
                    std::size_t batch_size);

struct RunOutputs {
  std::filesystem::path dir;
};

struct RunResult {
  std::vector<MetricsSnapshot> metrics;
  Model model;
  double final_val_accuracy = 0.0;
  double mean_step_ms = 0.0;
  double mean_capture_ms = 0.0;
};

/// Layers whose consistency is broken out with per_layer_consistency:
/// L/4, L/2 and 3L/4 (0-based, deduplicated).
std::vector<std::size_t> consistency_layers(std::size_t num_layers);

/// Trains from a fresh model seeded by tc.seed. With `out`, writes
/// metrics.jsonl, timing.jsonl and model.stgc into out->dir.
RunResult run_experiment(const ModelConfig& mc, const TrainConfig& tc, const Dataset& data,
                         const RunOutputs* out = nullptr,
                         const std::function<void(const MetricsSnapshot&)>& on_step = {});

}  // namespace stgc
