#include "stgc/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <string>

#include "stgc/analysis.hpp"
#include "stgc/checkpoint.hpp"
#include "stgc/error.hpp"

namespace stgc {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void add_scaled(Parameters& dst, Parameters& src, double scale) {
  auto d = tensors(dst);
  auto s = tensors(src);
  for (std::size_t t = 0; t < d.size(); ++t) {
    for (std::size_t i = 0; i < d[t].data.size(); ++i) d[t].data[i] += scale * s[t].data[i];
  }
}

}  // namespace

const char* to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  fail(ErrorKind::InvalidArgument, "unknown optimizer '" + s + "' (expected sgd or adam)");
}

void TrainConfig::validate() const {
  require(steps >= 1, ErrorKind::InvalidArgument, "steps must be >= 1");
  require(batch_size >= 1, ErrorKind::InvalidArgument, "batch_size must be >= 1");
  require(lr > 0.0 && std::isfinite(lr), ErrorKind::InvalidArgument, "lr must be > 0");
  require(grad_accum >= 1, ErrorKind::InvalidArgument, "grad_accum must be >= 1");
  require(stats_stride >= 1, ErrorKind::InvalidArgument, "stats_stride must be >= 1");
  require(eval_stride >= 1, ErrorKind::InvalidArgument, "eval_stride must be >= 1");
  require(val_fraction >= 0.0 && val_fraction < 1.0, ErrorKind::InvalidArgument,
          "val_fraction must lie in [0, 1)");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0,
          ErrorKind::InvalidArgument, "adam betas must lie in [0, 1)");
  require(adam_eps > 0.0, ErrorKind::InvalidArgument, "adam_eps must be > 0");
}

double learning_rate(const TrainConfig& cfg, std::size_t step) {
  if (!cfg.cosine_decay || cfg.steps <= 1) return cfg.lr;
  const double progress = static_cast<double>(step) / static_cast<double>(cfg.steps - 1);
  return 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * progress));
}

void optimizer_step(Parameters& params, Parameters& grads, OptimizerState& state,
                    const TrainConfig& cfg, double lr) {
  ++state.step;
  auto p = tensors(params);
  auto g = tensors(grads);
  if (cfg.optimizer == OptimizerKind::Sgd) {
    for (std::size_t t = 0; t < p.size(); ++t) {
      for (std::size_t i = 0; i < p[t].data.size(); ++i) p[t].data[i] -= lr * g[t].data[i];
    }
    return;
  }
  if (!state.m) {
    state.m = grads;
    state.v = grads;
    for (auto& t : tensors(*state.m)) std::fill(t.data.begin(), t.data.end(), 0.0);
    for (auto& t : tensors(*state.v)) std::fill(t.data.begin(), t.data.end(), 0.0);
  }
  auto m = tensors(*state.m);
  auto v = tensors(*state.v);
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < p.size(); ++t) {
    for (std::size_t i = 0; i < p[t].data.size(); ++i) {
      const double gi = g[t].data[i];
      m[t].data[i] = b1 * m[t].data[i] + (1.0 - b1) * gi;
      v[t].data[i] = b2 * v[t].data[i] + (1.0 - b2) * gi * gi;
      const double mhat = m[t].data[i] / c1;
      const double vhat = v[t].data[i] / c2;
      p[t].data[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

RouterLossTerms router_losses(const ForwardTrace& trace, const ModelConfig& cfg,
                              const ConflictReport* report, double aux_weight, double cel_weight,
                              bool cel_literal_sign) {
  const std::size_t n_tok = trace.num_tokens(), n_layers = cfg.num_layers, n_exp = cfg.num_experts;
  RouterLossTerms out;
  out.logit_grads.assign(n_layers, Matrix(n_tok, n_exp));

  const double inv_layers = 1.0 / static_cast<double>(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    AuxLoss aux = aux_loss(trace.layers[l].moe.decisions, n_exp);
    out.aux += aux.value * inv_layers;
    if (aux_weight != 0.0) {
      auto& g = out.logit_grads[l];
      for (std::size_t i = 0; i < g.size(); ++i) {
        g.flat()[i] += aux_weight * inv_layers * aux.logit_grads.flat()[i];
      }
    }
    out.per_layer_aux.push_back(std::move(aux));
  }

  if (report && !report->flagged.empty()) {
    std::vector<FlaggedLogits> flagged;
    flagged.reserve(report->flagged.size());
    for (const auto& f : report->flagged) {
      const auto z = trace.layers[f.layer_index].moe.logits.row(f.token_index);
      flagged.push_back({Vec(z.begin(), z.end()), f.expert_id});
    }
    std::vector<Vec> grads;
    out.cel = cfg.cel_kind == CelKind::CeLike ? cel_ce(flagged, n_exp, &grads, cel_literal_sign)
                                              : cel_mse(flagged, n_exp, &grads);
    if (cel_weight != 0.0) {
      for (std::size_t i = 0; i < flagged.size(); ++i) {
        const auto& f = report->flagged[i];
        auto row = out.logit_grads[f.layer_index].row(f.token_index);
        for (std::size_t e = 0; e < n_exp; ++e) row[e] += cel_weight * grads[i][e];
      }
    }
  }
  return out;
}

StepOutcome compute_step(const Parameters& params, const ModelConfig& cfg, const TrainConfig& tc,
                         const Batch& batch, bool capture) {
  require(batch.features.rows() > 0, ErrorKind::InvalidArgument, "train step: empty batch");
  StepOutcome out;
  CapacityPolicy policy;
  if (tc.capacity_in_training) policy = cfg.eval_capacity();
  const ForwardTrace trace = forward(params, cfg, batch.features, policy);
  const MainLoss ml = main_loss(trace.logits, batch.labels);

  const bool stgc = tc.stgc_enabled;
  if (stgc || capture) {
    const auto t0 = Clock::now();
    out.records = capture_token_bias_grads(params, cfg, trace, ml.logit_grads);
    out.report = identify_conflicting(out.records, cfg.tau, cfg.num_layers);
    out.capture_ms = ms_since(t0);
  }

  const double aux_weight = tc.verify_mode ? 0.0 : cfg.alpha;
  const double cel_weight = stgc ? cfg.beta : 0.0;
  RouterLossTerms rl = router_losses(trace, cfg, stgc && out.report ? &*out.report : nullptr,
                                     aux_weight, cel_weight, tc.cel_literal_sign);

  out.loss.main = ml.value;
  out.loss.aux = rl.aux;
  out.loss.cel = rl.cel;
  out.loss.total = total_loss(out.loss.main, out.loss.aux, out.loss.cel, cfg.alpha, stgc ? cfg.beta : 0.0);
  out.per_layer_aux = std::move(rl.per_layer_aux);

  if (!std::isfinite(out.loss.total)) {
    fail(ErrorKind::Numeric, "non-finite loss: main=" + std::to_string(out.loss.main) +
                                 " aux=" + std::to_string(out.loss.aux) +
                                 " cel=" + std::to_string(out.loss.cel) +
                                 " total=" + std::to_string(out.loss.total));
  }

  out.grads = zeros_like(cfg);
  BackwardOptions opts;
  opts.grads = &out.grads;
  opts.router_logit_grads = &rl.logit_grads;
  if (tc.verify_mode) {
    backward(params, cfg, trace, Matrix(ml.logit_grads.rows(), ml.logit_grads.cols()), opts);
  } else {
    backward(params, cfg, trace, ml.logit_grads, opts);
  }
  return out;
}

StepResult train_step(Model& model, std::span<const Batch> micro_batches, const TrainConfig& tc,
                      OptimizerState& opt, std::size_t step_index, bool want_stats) {
  require(!micro_batches.empty(), ErrorKind::InvalidArgument, "train_step: no micro-batches");
  const auto t0 = Clock::now();
  const ModelConfig& cfg = model.config;
  const double inv_accum = 1.0 / static_cast<double>(micro_batches.size());

  StepResult res;
  MetricsSnapshot& m = res.metrics;
  m.step = step_index;
  m.load_fractions.assign(cfg.num_layers, Vec(cfg.num_experts, 0.0));
  m.mean_scores.assign(cfg.num_layers, Vec(cfg.num_experts, 0.0));

  Parameters grads = zeros_like(cfg);
  std::vector<TokenGradRecord> pooled;
  Vec consistency_means, consistency_stds;
  std::vector<Vec> per_layer_consistency;
  bool have_report = false;
  std::vector<std::size_t> layer_records(cfg.num_layers, 0), layer_conflicting(cfg.num_layers, 0);
  std::size_t token_offset = 0;

  for (const Batch& b : micro_batches) {
    StepOutcome so = compute_step(model.params, cfg, tc, b, want_stats);
    add_scaled(grads, so.grads, inv_accum);
    res.loss.main += so.loss.main * inv_accum;
    res.loss.aux += so.loss.aux * inv_accum;
    res.loss.cel += so.loss.cel * inv_accum;
    m.capture_ms += so.capture_ms;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      for (std::size_t e = 0; e < cfg.num_experts; ++e) {
        m.load_fractions[l][e] += so.per_layer_aux[l].fractions[e] * inv_accum;
        m.mean_scores[l][e] += so.per_layer_aux[l].mean_scores[e] * inv_accum;
      }
    }
    if (so.report) {
      have_report = true;
      m.num_conflicting += so.report->num_conflicting;
      m.num_records += so.report->num_records;
      for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        layer_records[l] += so.report->per_layer_records[l];
        layer_conflicting[l] += so.report->per_layer_conflicting[l];
      }
    }
    if (want_stats && !so.records.empty()) {
      if (tc.pool_accum_stats) {
        for (auto& r : so.records) {
          r.token_index += token_offset;
          pooled.push_back(std::move(r));
        }
      } else {
        try {
          const auto cs = gradient_consistency(so.records, cfg.num_layers, tc.consistency_include_diagonal);
          consistency_means.push_back(cs.mean);
          consistency_stds.push_back(cs.std);
          per_layer_consistency.push_back(cs.per_layer);
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::Degenerate) throw;
        }
      }
    }
    token_offset += b.features.rows();
  }
  res.loss.total = total_loss(res.loss.main, res.loss.aux, res.loss.cel, cfg.alpha,
                              tc.stgc_enabled ? cfg.beta : 0.0);
  m.loss = res.loss;

  if (have_report) {
    m.conflicting_ratio = m.num_records > 0 ? static_cast<double>(m.num_conflicting) /
                                                  static_cast<double>(m.num_records)
                                            : 0.0;
    Vec per_layer(cfg.num_layers, 0.0);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      if (layer_records[l] > 0) {
        per_layer[l] = static_cast<double>(layer_conflicting[l]) / static_cast<double>(layer_records[l]);
      }
    }
    m.per_layer_conflicting_ratio = std::move(per_layer);
  }
  if (want_stats) {
    if (tc.pool_accum_stats && !pooled.empty()) {
      try {
        const auto cs = gradient_consistency(pooled, cfg.num_layers, tc.consistency_include_diagonal);
        consistency_means.push_back(cs.mean);
        consistency_stds.push_back(cs.std);
        per_layer_consistency.push_back(cs.per_layer);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::Degenerate) throw;
      }
    }
    if (!consistency_means.empty()) {
      m.gradient_consistency = mean(consistency_means);
      m.gradient_consistency_std = mean(consistency_stds);
      if (tc.per_layer_consistency) {
        Vec pl(cfg.num_layers, 0.0);
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
          double s = 0.0;
          for (const auto& row : per_layer_consistency) s += row[l];
          pl[l] = s / static_cast<double>(per_layer_consistency.size());
        }
        m.per_layer_consistency = pl;
      }
    }
  }
  optimizer_step(model.params, grads, opt, tc, learning_rate(tc, step_index));
  m.wall_ms = ms_since(t0);
  return res;
}

BatchSampler::BatchSampler(const Dataset& data, std::size_t batch_size, std::uint64_t seed)
    : data_(data), batch_size_(batch_size), rng_(seed) {
  require(data.size() >= batch_size, ErrorKind::InvalidArgument,
          "dataset has " + std::to_string(data.size()) + " samples, fewer than batch_size " +
              std::to_string(batch_size));
  order_.resize(data.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  rng_.shuffle(order_);
}

Batch BatchSampler::next() {
  if (pos_ + batch_size_ > order_.size()) {
    rng_.shuffle(order_);
    pos_ = 0;
  }
  Batch b;
  b.features = Matrix(batch_size_, data_.input_dim());
  b.labels.resize(batch_size_);
  for (std::size_t r = 0; r < batch_size_; ++r) {
    const std::size_t i = order_[pos_ + r];
    const auto src = data_.features.row(i);
    std::copy(src.begin(), src.end(), b.features.row(r).begin());
    b.labels[r] = data_.labels[i];
  }
  pos_ += batch_size_;
  return b;
}

EvalReport evaluate(const Model& model, const Dataset& data, const CapacityPolicy& policy,
                    std::size_t batch_size) {
  require(batch_size >= 1, ErrorKind::InvalidArgument, "evaluate: batch_size must be >= 1");
  require(data.size() > 0, ErrorKind::InvalidArgument, "evaluate: empty dataset");
  require(data.input_dim() == model.config.input_dim, ErrorKind::Dimension,
          "evaluate: dataset input_dim " + std::to_string(data.input_dim()) +
              " != model input_dim " + std::to_string(model.config.input_dim));
  const auto& cfg = model.config;
  EvalReport rep;
  rep.capacity_limited = !policy.unlimited();
  rep.capacity_factor = policy.capacity_factor;
  rep.bpr = policy.bpr;
  rep.batch_size = batch_size;
  const std::size_t n_tasks = std::max<std::size_t>(data.num_tasks, 1);
  rep.task_accuracy.assign(n_tasks, 0.0);
  rep.task_counts.assign(n_tasks, 0);
  rep.drops.assign(cfg.num_layers, std::vector<std::size_t>(cfg.num_experts, 0));
  rep.max_admitted.assign(cfg.num_layers, std::vector<std::size_t>(cfg.num_experts, 0));
  std::vector<std::size_t> task_correct(n_tasks, 0);
  std::size_t correct = 0;

  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    Matrix x(end - start, data.input_dim());
    for (std::size_t i = start; i < end; ++i) {
      const auto src = data.features.row(i);
      std::copy(src.begin(), src.end(), x.row(i - start).begin());
    }
    const ForwardTrace t = forward(model.params, cfg, x, policy);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      const auto& cap = t.layers[l].moe.capacity;
      if (!cap) continue;
      if (l == 0) rep.batch_capacity.push_back(cap->capacity);
      for (std::size_t e = 0; e < cfg.num_experts; ++e) {
        rep.drops[l][e] += cap->dropped[e];
        rep.max_admitted[l][e] = std::max(rep.max_admitted[l][e], cap->admitted[e]);
      }
    }
    for (std::size_t i = start; i < end; ++i) {
      const auto row = t.logits.row(i - start);
      const auto pred = static_cast<std::uint32_t>(argtopk(row, 1).front());
      const std::size_t task = data.tasks.empty() ? 0 : data.tasks[i];
      ++rep.task_counts.at(task);
      if (pred == data.labels[i]) {
        ++correct;
        ++task_correct[task];
      }
    }
  }
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  for (std::size_t t = 0; t < n_tasks; ++t) {
    if (rep.task_counts[t] > 0) {
      rep.task_accuracy[t] = static_cast<double>(task_correct[t]) / static_cast<double>(rep.task_counts[t]);
    }
  }
  return rep;
}

std::vector<std::size_t> consistency_layers(std::size_t num_layers) {
  std::vector<std::size_t> out;
  for (std::size_t q : {1, 2, 3}) {
    const std::size_t one_based = std::max<std::size_t>(1, (q * num_layers + 3) / 4);
    if (std::find(out.begin(), out.end(), one_based - 1) == out.end()) out.push_back(one_based - 1);
  }
  return out;
}

RunResult run_experiment(const ModelConfig& mc, const TrainConfig& tc, const Dataset& data,
                         const RunOutputs* out,
                         const std::function<void(const MetricsSnapshot&)>& on_step) {
  mc.validate();
  tc.validate();
  require(data.input_dim() == mc.input_dim, ErrorKind::Dimension,
          "dataset input_dim " + std::to_string(data.input_dim()) + " != model input_dim " +
              std::to_string(mc.input_dim));
  require(data.num_classes <= mc.num_classes, ErrorKind::Dimension,
          "dataset has " + std::to_string(data.num_classes) + " classes but the model only " +
              std::to_string(mc.num_classes));

  const DatasetSplit parts = split(data, tc.val_fraction);
  RunResult res;
  res.model = Model::create(mc, derive_seed(tc.seed, 1));
  OptimizerState opt;
  BatchSampler sampler(parts.train, tc.batch_size, derive_seed(tc.seed, 2));

  std::ofstream metrics_out, timing_out;
  if (out) {
    std::filesystem::create_directories(out->dir);
    metrics_out.open(out->dir / "metrics.jsonl", std::ios::trunc);
    timing_out.open(out->dir / "timing.jsonl", std::ios::trunc);
    if (!metrics_out || !timing_out) {
      fail(ErrorKind::Io, "cannot open metric files in '" + out->dir.string() + "'");
    }
  }
  const auto layers_of_interest =
      tc.per_layer_consistency ? consistency_layers(mc.num_layers) : std::vector<std::size_t>{};

  double step_ms = 0.0, capture_ms = 0.0;
  std::vector<Batch> micro(tc.grad_accum);
  for (std::size_t step = 0; step < tc.steps; ++step) {
    for (auto& b : micro) b = sampler.next();
    const bool want_stats = step % tc.stats_stride == 0 || step + 1 == tc.steps;
    StepResult sr = train_step(res.model, micro, tc, opt, step, want_stats);
    const bool eval_now = !parts.val.labels.empty() &&
                          ((step + 1) % tc.eval_stride == 0 || step + 1 == tc.steps);
    if (eval_now) {
      sr.metrics.val_accuracy =
          evaluate(res.model, parts.val, mc.eval_capacity(), tc.batch_size).accuracy;
    }
    step_ms += sr.metrics.wall_ms;
    capture_ms += sr.metrics.capture_ms;
    if (out) {
      metrics_out << metrics_json_line(sr.metrics, layers_of_interest) << '\n';
      timing_out << timing_json_line(sr.metrics) << '\n';
    }
    if (on_step) on_step(sr.metrics);
    res.metrics.push_back(std::move(sr.metrics));
  }
  if (!res.metrics.empty() && res.metrics.back().val_accuracy) {
    res.final_val_accuracy = *res.metrics.back().val_accuracy;
  }
  res.mean_step_ms = step_ms / static_cast<double>(tc.steps);
  res.mean_capture_ms = capture_ms / static_cast<double>(tc.steps);
  if (out) {
    metrics_out.flush();
    timing_out.flush();
    if (!metrics_out || !timing_out) fail(ErrorKind::Io, "failed writing metrics in '" + out->dir.string() + "'");
    save_checkpoint(res.model, out->dir / "model.stgc");
  }
  return res;
}

}  // namespace stgc
