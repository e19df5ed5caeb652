#include "stgc/model.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "stgc/error.hpp"

namespace stgc {

const char* to_string(CelKind kind) {
  return kind == CelKind::CeLike ? "ce_like" : "mse_like";
}

CelKind parse_cel_kind(const std::string& s) {
  if (s == "ce_like" || s == "ce") return CelKind::CeLike;
  if (s == "mse_like" || s == "mse") return CelKind::MseLike;
  fail(ErrorKind::InvalidArgument, "unknown cel kind '" + s + "' (expected ce_like or mse_like)");
}

const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::InputProj: return "input_proj";
    case ParamGroup::LayerNorm: return "layer_norm";
    case ParamGroup::Router: return "router";
    case ParamGroup::ExpertW1: return "expert_w1";
    case ParamGroup::ExpertB1: return "expert_b1";
    case ParamGroup::ExpertW2: return "expert_w2";
    case ParamGroup::ExpertB2: return "expert_b2";
    case ParamGroup::Head: return "head";
  }
  return "?";
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    require(v >= 1, ErrorKind::InvalidArgument, std::string(name) + " must be >= 1");
  };
  positive(hidden_size, "hidden_size");
  positive(intermediate_size, "intermediate_size");
  positive(num_experts, "num_experts");
  positive(num_layers, "num_layers");
  require(num_classes >= 2, ErrorKind::InvalidArgument, "num_classes must be >= 2");
  positive(input_dim, "input_dim");
  require(top_k >= 1 && top_k <= num_experts, ErrorKind::InvalidArgument,
          "top_k must satisfy 1 <= k <= num_experts");
  require(tau >= -1.0 && tau <= 1.0, ErrorKind::InvalidArgument, "tau must lie in [-1, 1]");
  require(alpha >= 0.0 && std::isfinite(alpha), ErrorKind::InvalidArgument, "alpha must be >= 0");
  require(beta >= 0.0 && std::isfinite(beta), ErrorKind::InvalidArgument, "beta must be >= 0");
  if (capacity_factor) {
    require(*capacity_factor > 0.0, ErrorKind::InvalidArgument, "capacity_factor must be > 0");
  }
}

CapacityPolicy ModelConfig::eval_capacity() const {
  CapacityPolicy p;
  if (capacity_factor) p.capacity_factor = *capacity_factor;
  p.bpr = bpr;
  return p;
}

std::vector<TensorRef> tensors(Parameters& p) {
  std::vector<TensorRef> out;
  out.push_back({"in_w", ParamGroup::InputProj, p.in_w.flat()});
  out.push_back({"in_b", ParamGroup::InputProj, p.in_b});
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& layer = p.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    out.push_back({pre + "ln_gain", ParamGroup::LayerNorm, layer.ln_gain});
    out.push_back({pre + "ln_bias", ParamGroup::LayerNorm, layer.ln_bias});
    out.push_back({pre + "router_w", ParamGroup::Router, layer.router_w.flat()});
    for (std::size_t e = 0; e < layer.experts.size(); ++e) {
      auto& ex = layer.experts[e];
      const std::string epre = pre + "experts." + std::to_string(e) + ".";
      out.push_back({epre + "w1", ParamGroup::ExpertW1, ex.w1.flat()});
      out.push_back({epre + "b1", ParamGroup::ExpertB1, ex.b1});
      out.push_back({epre + "w2", ParamGroup::ExpertW2, ex.w2.flat()});
      out.push_back({epre + "b2", ParamGroup::ExpertB2, ex.b2});
    }
  }
  out.push_back({"head_w", ParamGroup::Head, p.head_w.flat()});
  out.push_back({"head_b", ParamGroup::Head, p.head_b});
  return out;
}

std::size_t parameter_count(const Parameters& p) {
  std::size_t n = 0;
  for (const auto& t : tensors(const_cast<Parameters&>(p))) n += t.data.size();
  return n;
}

Parameters zeros_like(const ModelConfig& cfg) {
  const std::size_t d = cfg.hidden_size, dp = cfg.intermediate_size;
  Parameters p;
  p.in_w = Matrix(cfg.input_dim, d);
  p.in_b = Vec(d, 0.0);
  p.layers.resize(cfg.num_layers);
  for (auto& layer : p.layers) {
    layer.router_w = Matrix(d, cfg.num_experts);
    layer.ln_gain = Vec(d, 0.0);
    layer.ln_bias = Vec(d, 0.0);
    layer.experts.resize(cfg.num_experts);
    for (auto& ex : layer.experts) {
      ex.w1 = Matrix(d, dp);
      ex.b1 = Vec(dp, 0.0);
      ex.w2 = Matrix(dp, d);
      ex.b2 = Vec(d, 0.0);
    }
  }
  p.head_w = Matrix(d, cfg.num_classes);
  p.head_b = Vec(cfg.num_classes, 0.0);
  return p;
}

Parameters init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Parameters p = zeros_like(cfg);
  Rng rng(derive_seed(seed, 0x1A17));
  auto fill_normal = [&](Matrix& m, double fan_in) {
    const double s = 1.0 / std::sqrt(fan_in);
    for (auto& v : m.flat()) v = rng.normal(0.0, s);
  };
  fill_normal(p.in_w, static_cast<double>(cfg.input_dim));
  for (auto& layer : p.layers) {
    std::fill(layer.ln_gain.begin(), layer.ln_gain.end(), 1.0);
    fill_normal(layer.router_w, static_cast<double>(cfg.hidden_size));
    for (auto& ex : layer.experts) {
      fill_normal(ex.w1, static_cast<double>(cfg.hidden_size));
      fill_normal(ex.w2, static_cast<double>(cfg.intermediate_size));
    }
  }
  fill_normal(p.head_w, static_cast<double>(cfg.hidden_size));
  return p;
}

std::uint64_t checksum(const Parameters& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tensors(const_cast<Parameters&>(p))) {
    for (double v : t.data) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

Model Model::create(const ModelConfig& cfg, std::uint64_t seed) {
  return Model{cfg, init_parameters(cfg, seed)};
}

namespace {

void check_finite_row(std::span<const double> row, const char* what, std::size_t layer,
                      std::size_t token) {
  for (double v : row) {
    if (!std::isfinite(v)) {
      fail(ErrorKind::Numeric, std::string("non-finite ") + what + " at layer " +
                                   std::to_string(layer) + ", token " + std::to_string(token));
    }
  }
}

}  // namespace

MoeOutput moe_forward(const MoeLayer& layer, const ModelConfig& cfg, const Matrix& tokens,
                      const CapacityPolicy& policy, std::size_t layer_index) {
  const std::size_t n_tok = tokens.rows();
  const std::size_t d = cfg.hidden_size, dp = cfg.intermediate_size, k = cfg.top_k;
  require(tokens.cols() == d, ErrorKind::Dimension, "moe_forward: token width != hidden_size");
  require(layer.experts.size() == cfg.num_experts, ErrorKind::Dimension,
          "moe_forward: expert count != num_experts");

  MoeOutput out;
  out.logits = matmul(tokens, layer.router_w);
  out.decisions.reserve(n_tok);
  for (std::size_t n = 0; n < n_tok; ++n) {
    check_finite_row(tokens.row(n), "router input", layer_index, n);
    out.decisions.push_back(route(out.logits.row(n), k));
  }
  if (!policy.unlimited()) {
    out.capacity = apply_capacity(out.decisions, policy, cfg.num_experts);
  }

  out.outputs = Matrix(n_tok, d);
  out.pre_act = Matrix(n_tok * k, dp);
  out.post_act = Matrix(n_tok * k, dp);
  out.expert_out = Matrix(n_tok * k, d);
  for (std::size_t n = 0; n < n_tok; ++n) {
    const auto& dec = out.decisions[n];
    const auto x = tokens.row(n);
    for (std::size_t j = 0; j < k; ++j) {
      if (dec.dropped[j]) continue;
      const Expert& ex = layer.experts[dec.topk_ids[j]];
      const std::size_t r = n * k + j;
      auto a = out.pre_act.row(r);
      auto u = out.post_act.row(r);
      auto y = out.expert_out.row(r);
      for (std::size_t i = 0; i < dp; ++i) {
        double acc = ex.b1[i];
        for (std::size_t c = 0; c < d; ++c) acc += x[c] * ex.w1(c, i);
        a[i] = acc;
        u[i] = gelu(acc);
      }
      for (std::size_t c = 0; c < d; ++c) {
        double acc = ex.b2[c];
        for (std::size_t i = 0; i < dp; ++i) acc += u[i] * ex.w2(i, c);
        y[c] = acc;
      }
      const double w = dec.topk_weights[j];
      auto o = out.outputs.row(n);
      for (std::size_t c = 0; c < d; ++c) o[c] += w * y[c];
    }
    check_finite_row(out.outputs.row(n), "expert output", layer_index, n);
  }
  return out;
}

LayerTrace block_forward(const Parameters& p, const ModelConfig& cfg, std::size_t block_index,
                         const Matrix& x, const CapacityPolicy& policy) {
  require(block_index < p.layers.size(), ErrorKind::InvalidArgument, "block index out of range");
  const MoeLayer& layer = p.layers[block_index];
  const std::size_t n_tok = x.rows(), d = cfg.hidden_size;
  require(x.cols() == d, ErrorKind::Dimension, "block_forward: width != hidden_size");

  LayerTrace t;
  t.x_in = x;
  t.xhat = Matrix(n_tok, d);
  t.h = Matrix(n_tok, d);
  t.inv_std.resize(n_tok);
  for (std::size_t n = 0; n < n_tok; ++n) {
    check_finite_row(x.row(n), "block input", block_index, n);
    const auto stats = layer_norm(x.row(n), t.xhat.row(n));
    t.inv_std[n] = stats.inv_std;
    for (std::size_t c = 0; c < d; ++c) {
      t.h(n, c) = layer.ln_gain[c] * t.xhat(n, c) + layer.ln_bias[c];
    }
  }
  t.moe = moe_forward(layer, cfg, t.h, policy, block_index);
  t.x_out = x;
  for (std::size_t i = 0; i < t.x_out.size(); ++i) t.x_out.flat()[i] += t.moe.outputs.flat()[i];
  return t;
}

ForwardTrace forward(const Parameters& p, const ModelConfig& cfg, const Matrix& features,
                     const CapacityPolicy& policy) {
  require(features.cols() == cfg.input_dim, ErrorKind::Dimension,
          "forward: feature width " + std::to_string(features.cols()) + " != input_dim " +
              std::to_string(cfg.input_dim));
  require(p.layers.size() == cfg.num_layers, ErrorKind::Dimension, "forward: layer count mismatch");
  ForwardTrace t;
  t.features = features;
  t.x0 = matmul(features, p.in_w);
  for (std::size_t n = 0; n < t.x0.rows(); ++n) {
    for (std::size_t c = 0; c < cfg.hidden_size; ++c) t.x0(n, c) += p.in_b[c];
  }
  t.layers.reserve(cfg.num_layers);
  const Matrix* x = &t.x0;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    t.layers.push_back(block_forward(p, cfg, l, *x, policy));
    x = &t.layers.back().x_out;
  }
  t.logits = matmul(*x, p.head_w);
  for (std::size_t n = 0; n < t.logits.rows(); ++n) {
    for (std::size_t c = 0; c < cfg.num_classes; ++c) t.logits(n, c) += p.head_b[c];
    check_finite_row(t.logits.row(n), "logits", cfg.num_layers, n);
  }
  return t;
}

void backward(const Parameters& p, const ModelConfig& cfg, const ForwardTrace& trace,
              const Matrix& logit_grads, const BackwardOptions& opts) {
  const std::size_t n_tok = trace.num_tokens();
  const std::size_t d = cfg.hidden_size, dp = cfg.intermediate_size, k = cfg.top_k;
  const std::size_t n_exp = cfg.num_experts;
  require(logit_grads.rows() == n_tok && logit_grads.cols() == cfg.num_classes,
          ErrorKind::Dimension, "backward: logit gradient shape does not match trace");
  require(trace.layers.size() == p.layers.size() && p.layers.size() == cfg.num_layers,
          ErrorKind::Dimension, "backward: trace/parameter layer count mismatch");
  require(p.head_w.rows() == d && p.head_w.cols() == cfg.num_classes, ErrorKind::Dimension,
          "backward: head shape mismatch");
  if (opts.router_logit_grads) {
    require(opts.router_logit_grads->size() == cfg.num_layers, ErrorKind::Dimension,
            "backward: router grads must have one matrix per layer");
  }
  Parameters* g = opts.grads;
  const bool capture = opts.capture != CaptureMode::None && opts.records != nullptr;
  const bool capture_w = opts.capture == CaptureMode::BiasAndWeights;

  const Matrix& x_final = trace.final_hidden();
  if (g) {
    for (std::size_t n = 0; n < n_tok; ++n) {
      for (std::size_t c = 0; c < cfg.num_classes; ++c) {
        const double gl = logit_grads(n, c);
        g->head_b[c] += gl;
        for (std::size_t r = 0; r < d; ++r) g->head_w(r, c) += x_final(n, r) * gl;
      }
    }
  }
  Matrix dx = matmul_nt(logit_grads, p.head_w);

  Vec dz_sel(k), dw(k), dz(n_exp), du(dp), da(dp), dy(d), dh(d), dxhat(d);
  for (std::size_t li = cfg.num_layers; li-- > 0;) {
    const MoeLayer& layer = p.layers[li];
    const LayerTrace& lt = trace.layers[li];
    require(lt.moe.decisions.size() == n_tok, ErrorKind::Dimension, "backward: trace token count");
    MoeLayer* gl = g ? &g->layers[li] : nullptr;
    const Matrix* extra = opts.router_logit_grads ? &(*opts.router_logit_grads)[li] : nullptr;
    if (extra) {
      require(extra->rows() == n_tok && extra->cols() == n_exp, ErrorKind::Dimension,
              "backward: router grad shape");
    }

    Matrix dx_in(n_tok, d);
    for (std::size_t n = 0; n < n_tok; ++n) {
      const auto dout = dx.row(n);
      const auto h = lt.h.row(n);
      const auto& dec = lt.moe.decisions[n];
      std::fill(dh.begin(), dh.end(), 0.0);

      for (std::size_t j = 0; j < k; ++j) {
        dw[j] = 0.0;
        if (dec.dropped[j]) continue;
        const std::size_t e = dec.topk_ids[j];
        const Expert& ex = layer.experts[e];
        const std::size_t r = n * k + j;
        const auto a = lt.moe.pre_act.row(r);
        const auto u = lt.moe.post_act.row(r);
        const auto y = lt.moe.expert_out.row(r);
        const double w = dec.topk_weights[j];

        dw[j] = dot(dout, y);
        for (std::size_t c = 0; c < d; ++c) dy[c] = w * dout[c];
        for (std::size_t i = 0; i < dp; ++i) {
          double acc = 0.0;
          for (std::size_t c = 0; c < d; ++c) acc += ex.w2(i, c) * dy[c];
          du[i] = acc;
          da[i] = acc * gelu_grad(a[i]);
        }
        for (std::size_t c = 0; c < d; ++c) {
          double acc = 0.0;
          for (std::size_t i = 0; i < dp; ++i) acc += ex.w1(c, i) * da[i];
          dh[c] += acc;
        }
        if (gl) {
          Expert& ge = gl->experts[e];
          for (std::size_t c = 0; c < d; ++c) ge.b2[c] += dy[c];
          for (std::size_t i = 0; i < dp; ++i) {
            for (std::size_t c = 0; c < d; ++c) ge.w2(i, c) += u[i] * dy[c];
          }
          for (std::size_t i = 0; i < dp; ++i) ge.b1[i] += da[i];
          for (std::size_t c = 0; c < d; ++c) {
            for (std::size_t i = 0; i < dp; ++i) ge.w1(c, i) += h[c] * da[i];
          }
        }
        if (capture) {
          TokenGradRecord rec;
          rec.token_index = n;
          rec.layer_index = li;
          rec.expert_id = e;
          rec.g1 = da;
          rec.g2 = dy;
          if (capture_w) {
            rec.gw1.resize(d * dp);
            for (std::size_t c = 0; c < d; ++c) {
              for (std::size_t i = 0; i < dp; ++i) rec.gw1[c * dp + i] = h[c] * da[i];
            }
            rec.gw2.resize(dp * d);
            for (std::size_t i = 0; i < dp; ++i) {
              for (std::size_t c = 0; c < d; ++c) rec.gw2[i * d + c] = u[i] * dy[c];
            }
          }
          opts.records->push_back(std::move(rec));
        }
      }

      // Mixing weights are a softmax over the selected logits.
      double wdw = 0.0;
      for (std::size_t j = 0; j < k; ++j) wdw += dec.topk_weights[j] * dw[j];
      std::fill(dz.begin(), dz.end(), 0.0);
      for (std::size_t j = 0; j < k; ++j) {
        dz_sel[j] = dec.topk_weights[j] * (dw[j] - wdw);
        dz[dec.topk_ids[j]] += dz_sel[j];
      }
      if (extra) {
        for (std::size_t e = 0; e < n_exp; ++e) dz[e] += (*extra)(n, e);
      }
      for (std::size_t c = 0; c < d; ++c) {
        double acc = 0.0;
        for (std::size_t e = 0; e < n_exp; ++e) acc += layer.router_w(c, e) * dz[e];
        dh[c] += acc;
      }
      if (gl) {
        for (std::size_t c = 0; c < d; ++c) {
          for (std::size_t e = 0; e < n_exp; ++e) gl->router_w(c, e) += h[c] * dz[e];
        }
      }

      // LayerNorm backward.
      const auto xhat = lt.xhat.row(n);
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        dxhat[c] = dh[c] * layer.ln_gain[c];
        mean_dxhat += dxhat[c];
        mean_dxhat_xhat += dxhat[c] * xhat[c];
        if (gl) {
          gl->ln_gain[c] += dh[c] * xhat[c];
          gl->ln_bias[c] += dh[c];
        }
      }
      mean_dxhat /= static_cast<double>(d);
      mean_dxhat_xhat /= static_cast<double>(d);
      auto out_row = dx_in.row(n);
      for (std::size_t c = 0; c < d; ++c) {
        out_row[c] = dout[c] + lt.inv_std[n] * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
      }
    }
    dx = std::move(dx_in);
  }

  if (g) {
    for (std::size_t n = 0; n < n_tok; ++n) {
      for (std::size_t c = 0; c < d; ++c) {
        const double v = dx(n, c);
        g->in_b[c] += v;
        for (std::size_t r = 0; r < cfg.input_dim; ++r) g->in_w(r, c) += trace.features(n, r) * v;
      }
    }
  }
}

Parameters backward(const Parameters& p, const ModelConfig& cfg, const ForwardTrace& trace,
                    const Matrix& logit_grads, const std::vector<Matrix>* router_logit_grads) {
  Parameters grads = zeros_like(cfg);
  BackwardOptions opts;
  opts.grads = &grads;
  opts.router_logit_grads = router_logit_grads;
  backward(p, cfg, trace, logit_grads, opts);
  return grads;
}

std::vector<TokenGradRecord> capture_token_bias_grads(const Parameters& p, const ModelConfig& cfg,
                                                      const ForwardTrace& trace,
                                                      const Matrix& logit_grads,
                                                      bool with_weights) {
  std::vector<TokenGradRecord> records;
  BackwardOptions opts;
  opts.capture = with_weights ? CaptureMode::BiasAndWeights : CaptureMode::Bias;
  opts.records = &records;
  backward(p, cfg, trace, logit_grads, opts);
  return records;
}

}  // namespace stgc
