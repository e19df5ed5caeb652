#pragma once

// Toy residual MoE classifier:
//   x0      = features * in_w + in_b
//   x_l     = x_{l-1} + MoE_l(LN_l(x_{l-1}))      l = 1..L
//   logits  = x_L * head_w + head_b
// Each expert is fc1 -> GELU -> fc2. Attention is replaced by identity, so
// every token's loss depends only on that token's own activations.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stgc/numkit.hpp"
#include "stgc/routing.hpp"
#include "stgc/token_grad.hpp"

namespace stgc {

enum class CelKind { CeLike, MseLike };

const char* to_string(CelKind kind);
CelKind parse_cel_kind(const std::string& s);

struct ModelConfig {
  std::size_t hidden_size = 16;         // D
  std::size_t intermediate_size = 32;   // D'
  std::size_t num_experts = 4;          // E
  std::size_t top_k = 2;                // k
  std::size_t num_layers = 4;           // L
  std::size_t num_classes = 8;          // C
  std::size_t input_dim = 16;
  double tau = 0.0;
  double alpha = 0.01;
  double beta = 1.0;
  CelKind cel_kind = CelKind::CeLike;
  std::optional<double> capacity_factor;  // evaluation-time limit; none = unlimited
  bool bpr = false;

  void validate() const;
  CapacityPolicy eval_capacity() const;
};

struct Expert {
  Matrix w1;  // D x D'
  Vec b1;     // D'
  Matrix w2;  // D' x D
  Vec b2;     // D

  friend bool operator==(const Expert&, const Expert&) = default;
};

struct MoeLayer {
  Matrix router_w;  // D x E
  std::vector<Expert> experts;
  Vec ln_gain;
  Vec ln_bias;

  friend bool operator==(const MoeLayer&, const MoeLayer&) = default;
};

struct Parameters {
  Matrix in_w;  // input_dim x D
  Vec in_b;
  std::vector<MoeLayer> layers;
  Matrix head_w;  // D x C
  Vec head_b;

  friend bool operator==(const Parameters&, const Parameters&) = default;
};

enum class ParamGroup { InputProj, LayerNorm, Router, ExpertW1, ExpertB1, ExpertW2, ExpertB2, Head };

const char* to_string(ParamGroup g);

struct TensorRef {
  std::string name;
  ParamGroup group;
  std::span<double> data;
};

/// All trainable tensors in checkpoint order: in_w, in_b, then per layer
/// ln_gain, ln_bias, router_w, and per expert w1, b1, w2, b2; head_w, head_b.
std::vector<TensorRef> tensors(Parameters& p);
std::size_t parameter_count(const Parameters& p);

Parameters zeros_like(const ModelConfig& cfg);
Parameters init_parameters(const ModelConfig& cfg, std::uint64_t seed);

/// FNV-1a over the raw bytes of every tensor in checkpoint order.
std::uint64_t checksum(const Parameters& p);

struct Model {
  ModelConfig config;
  Parameters params;

  static Model create(const ModelConfig& cfg, std::uint64_t seed);
};

struct MoeOutput {
  Matrix outputs;  // N x D
  std::vector<RoutingDecision> decisions;
  Matrix logits;      // N x E
  Matrix pre_act;     // (N*k) x D', row n*k + slot
  Matrix post_act;    // (N*k) x D'
  Matrix expert_out;  // (N*k) x D
  std::optional<CapacityStats> capacity;
};

MoeOutput moe_forward(const MoeLayer& layer, const ModelConfig& cfg, const Matrix& tokens,
                      const CapacityPolicy& policy = {}, std::size_t layer_index = 0);

struct LayerTrace {
  Matrix x_in;  // pre-LN input
  Matrix xhat;
  Vec inv_std;
  Matrix h;  // LN output
  MoeOutput moe;
  Matrix x_out;
};

LayerTrace block_forward(const Parameters& p, const ModelConfig& cfg, std::size_t block_index,
                         const Matrix& x, const CapacityPolicy& policy = {});

struct ForwardTrace {
  Matrix features;
  Matrix x0;
  std::vector<LayerTrace> layers;
  Matrix logits;  // N x C

  std::size_t num_tokens() const { return features.rows(); }
  const Matrix& final_hidden() const { return layers.empty() ? x0 : layers.back().x_out; }
};

ForwardTrace forward(const Parameters& p, const ModelConfig& cfg, const Matrix& features,
                     const CapacityPolicy& policy = {});

enum class CaptureMode { None, Bias, BiasAndWeights };

struct BackwardOptions {
  // Extra dL/dz per layer (N x E each) from router-level losses.
  const std::vector<Matrix>* router_logit_grads = nullptr;
  // Null skips weight/bias accumulation entirely (capture-only pass).
  Parameters* grads = nullptr;
  CaptureMode capture = CaptureMode::None;
  std::vector<TokenGradRecord>* records = nullptr;
};

/// Reverse pass from logit gradients. Top-k indices are constants; gradient
/// reaches router_w through the mixing weights and any extra logit grads.
void backward(const Parameters& p, const ModelConfig& cfg, const ForwardTrace& trace,
              const Matrix& logit_grads, const BackwardOptions& opts);

Parameters backward(const Parameters& p, const ModelConfig& cfg, const ForwardTrace& trace,
                    const Matrix& logit_grads,
                    const std::vector<Matrix>* router_logit_grads = nullptr);

/// Per-token bias gradients of the given logit gradients; touches no parameter.
std::vector<TokenGradRecord> capture_token_bias_grads(const Parameters& p, const ModelConfig& cfg,
                                                      const ForwardTrace& trace,
                                                      const Matrix& logit_grads,
                                                      bool with_weights = false);

}  // namespace stgc
