#include "rfamoe/moe_blocks.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace rfamoe {

std::string to_string(GateMode mode) {
  return mode == GateMode::renormalized ? "renormalized" : "raw_probability";
}

GateMode parse_gate_mode(const std::string& text) {
  if (text == "renormalized") return GateMode::renormalized;
  if (text == "raw_probability") return GateMode::raw_probability;
  throw std::invalid_argument("unknown gate mode '" + text +
                              "' (expected renormalized or raw_probability)");
}

namespace {

Tensor uniform_tensor(const Shape& shape, double bound, Rng& rng) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

ConvParams init_conv(std::size_t cout, std::size_t cin, std::size_t kernel, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * kernel));
  return {uniform_tensor({cout, cin, kernel}, bound, rng), Tensor({cout})};
}

LinearParams init_linear(std::size_t dout, std::size_t din, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(din));
  return {uniform_tensor({dout, din}, bound, rng), Tensor({dout})};
}

void validate_kernels(std::span<const std::size_t> kernels) {
  if (kernels.empty()) throw std::invalid_argument("RFAMoE needs at least one expert");
  std::set<std::size_t> seen;
  for (auto k : kernels) {
    if (k % 2 == 0) {
      throw std::invalid_argument("RFAMoE kernel sizes must be odd, got " + std::to_string(k));
    }
    if (!seen.insert(k).second) {
      throw std::invalid_argument("RFAMoE kernel sizes must be distinct, " + std::to_string(k) +
                                  " repeats");
    }
  }
}

void validate_width(std::size_t width) {
  if (width == 0 || width % 2 != 0) {
    throw std::invalid_argument("feature width L must be even and positive, got " +
                                std::to_string(width));
  }
}

}  // namespace

std::vector<std::size_t> odd_kernel_ladder(std::size_t count) {
  std::vector<std::size_t> ks(count);
  for (std::size_t i = 0; i < count; ++i) ks[i] = 3 + 2 * i;
  return ks;
}

RFAMoEParams init_rfamoe(std::size_t in_width, std::size_t width,
                         std::span<const std::size_t> kernels, std::size_t channels, Rng& rng) {
  validate_kernels(kernels);
  validate_width(width);
  RFAMoEParams p;
  for (auto k : kernels) p.experts.push_back(init_conv(width, in_width, k, rng));
  p.router = init_linear(kernels.size(), in_width, rng);
  p.norm_gamma = Tensor({width}, 1.0);
  p.norm_beta = Tensor({width});
  p.gate_proj = init_conv(width, width / 2, 1, rng);
  p.fuse = init_conv(channels * width, channels * width, 1, rng);
  if (in_width != width) p.residual = init_conv(width, in_width, 1, rng);
  return p;
}

BridgeParams init_bridge(std::size_t d_emb, std::size_t width, Rng& rng) {
  BridgeParams p{init_linear(2 * width, d_emb, rng)};
  // Start near identity modulation: gamma bias 1, beta bias 0.
  for (std::size_t l = 0; l < width; ++l) p.film.bias[l] = 1.0;
  return p;
}

FusionMoEParams init_fusion_moe(std::size_t width, std::size_t experts, Rng& rng) {
  if (experts == 0) throw std::invalid_argument("Fusion MoE needs at least one expert");
  FusionMoEParams p;
  for (std::size_t k = 0; k < experts; ++k) p.experts.push_back(init_conv(1, width, 1, rng));
  p.router = init_linear(experts, width, rng);
  return p;
}

Tensor step_embedding(int step, std::size_t d_emb) {
  if (d_emb == 0 || d_emb % 2 != 0) {
    throw std::invalid_argument("step embedding size must be even, got " + std::to_string(d_emb));
  }
  if (step < 0) throw std::invalid_argument("diffusion step must be non-negative");
  Tensor e({d_emb});
  for (std::size_t i = 0; i < d_emb / 2; ++i) {
    const double freq =
        std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_emb));
    const double arg = static_cast<double>(step) / freq;
    e[2 * i] = std::sin(arg);
    e[2 * i + 1] = std::cos(arg);
  }
  return e;
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<std::size_t> idx(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 1; j < k; ++j) {
      if (logits.at(i, j) > logits.at(i, idx[i])) idx[i] = j;
    }
  }
  return idx;
}

Top1Route route_top1(const Tensor& features, const LinearParams& router, GateMode mode) {
  const Tensor logits = ops::linear(ops::mean_last_axis(features), router.weight, router.bias);
  Top1Route r{argmax_rows(logits), {}};
  if (mode == GateMode::renormalized) {
    r.gate.assign(r.index.size(), 1.0);
  } else {
    const Tensor probs = ops::softmax(logits);
    for (std::size_t n = 0; n < r.index.size(); ++n) r.gate.push_back(probs.at(n, r.index[n]));
  }
  return r;
}

namespace layers {

ad::Var rfamoe_forward(ad::ParamScope& scope, ad::Var x, const RFAMoEParams& params,
                       BlockDims dims, GateMode mode) {
  const Shape in = x.shape();
  if (in.size() != 3) throw ShapeError("rfamoe: input must be [N,L_in,T], got " + shape_to_string(in));
  const std::size_t n = in[0], t = in[2], width = params.width();
  validate_width(width);
  if (dims.channels == 0 || n % dims.channels != 0) {
    throw ShapeError("rfamoe: feature-map axis 0 (" + std::to_string(n) +
                     ") not divisible by channel count C=" + std::to_string(dims.channels));
  }
  if (n != dims.batch * dims.channels) {
    throw ShapeError("rfamoe: feature-map axis 0 (" + std::to_string(n) + ") != B*C = " +
                     std::to_string(dims.batch * dims.channels));
  }
  if (in[1] != params.in_width()) {
    throw ShapeError("rfamoe: input width axis 1 (" + std::to_string(in[1]) +
                     ") != router input width " + std::to_string(params.in_width()));
  }
  if (params.fuse.weight.dim(0) != dims.channels * width) {
    throw ShapeError("rfamoe: fusion conv expects C*L = " +
                     std::to_string(params.fuse.weight.dim(0)) + " channels, got " +
                     std::to_string(dims.channels * width));
  }

  auto bind = [&](const Tensor& p) { return scope.bind(p); };

  ad::Var logits = ad::linear(ad::mean_last_axis(x), bind(params.router.weight),
                              bind(params.router.bias));
  const auto index = argmax_rows(logits.value());

  std::vector<ad::Var> weights, biases;
  for (const auto& e : params.experts) {
    weights.push_back(bind(e.weight));
    biases.push_back(bind(e.bias));
  }
  ad::Var h = ad::routed_conv1d(x, weights, biases, index);
  if (mode == GateMode::raw_probability) {
    h = ad::scale_rows(h, ad::gather_rows(ad::softmax(logits), index));
  }
  h = ad::instance_norm(h, bind(params.norm_gamma), bind(params.norm_beta));

  const std::size_t half = width / 2;
  ad::Var gated = ad::mul(ad::gelu(ad::channel_slice(h, 0, half)),
                          ad::channel_slice(h, half, width));
  h = ad::conv1d(gated, bind(params.gate_proj.weight), bind(params.gate_proj.bias));

  h = ad::reshape(h, {dims.batch, dims.channels * width, t});
  h = ad::conv1d(h, bind(params.fuse.weight), bind(params.fuse.bias));
  h = ad::reshape(h, {n, width, t});

  ad::Var skip = params.residual ? ad::conv1d(x, bind(params.residual->weight),
                                              bind(params.residual->bias))
                                 : x;
  if (!params.residual && in[1] != width) {
    throw ShapeError("rfamoe: width change without residual projection");
  }
  return ad::add(h, skip);
}

ad::Var bridge_forward(ad::ParamScope& scope, ad::Var h, std::span<const int> steps,
                       const BridgeParams& params) {
  const std::size_t d_emb = params.film.weight.dim(1);
  Tensor emb({steps.size(), d_emb});
  for (std::size_t g = 0; g < steps.size(); ++g) {
    const Tensor e = step_embedding(steps[g], d_emb);
    std::copy(e.data().begin(), e.data().end(), emb.data().begin() + g * d_emb);
  }
  ad::Var gb = ad::linear(scope.constant(std::move(emb)), scope.bind(params.film.weight),
                          scope.bind(params.film.bias));
  return ad::film(h, gb);
}

ad::Var fusion_moe_forward(ad::ParamScope& scope, ad::Var features,
                           const FusionMoEParams& params, const Tensor* forced_gates) {
  const Shape in = features.shape();
  if (in.size() != 3) {
    throw ShapeError("fusion_moe: input must be [N,L,T], got " + shape_to_string(in));
  }
  const std::size_t n = in[0], width = in[1], k = params.expert_count();
  if (width != params.width()) {
    throw ShapeError("fusion_moe: input width axis 1 (" + std::to_string(width) +
                     ") != expert input width " + std::to_string(params.width()));
  }
  ad::Var gates;
  if (forced_gates) {
    if (forced_gates->shape() != Shape{n, k}) {
      throw ShapeError("fusion_moe: forced gates must be [N,K] = [" + std::to_string(n) + "," +
                       std::to_string(k) + "]");
    }
    gates = scope.constant(*forced_gates);
  } else {
    gates = ad::softmax(ad::linear(ad::mean_last_axis(features), scope.bind(params.router.weight),
                                   scope.bind(params.router.bias)));
  }
  std::vector<ad::Var> ws, bs;
  for (const auto& e : params.experts) {
    if (e.weight.shape() != Shape{1, width, 1} || e.bias.shape() != Shape{1}) {
      throw ShapeError("fusion_moe: every expert must be a kernel-1 conv L->1");
    }
    ws.push_back(scope.bind(e.weight));
    bs.push_back(scope.bind(e.bias));
  }
  // Merge first, convolve once: [N,K] x [K,L] -> per-sample kernels [N,L].
  ad::Var merged_w = ad::matmul(gates, ad::reshape(ad::stack(ws), {k, width}));
  ad::Var merged_b = ad::reshape(ad::matmul(gates, ad::reshape(ad::stack(bs), {k, 1})), {n});
  return ad::per_sample_conv1x1(features, merged_w, merged_b);
}

}  // namespace layers

namespace {

template <typename Build>
Tensor run_inference(Build&& build) {
  ad::Graph graph;
  ad::ParamScope scope(graph, false);
  return build(scope).value();
}

}  // namespace

Tensor rfamoe_forward(const Tensor& x, const RFAMoEParams& params, BlockDims dims,
                      GateMode mode) {
  return run_inference([&](ad::ParamScope& s) {
    return layers::rfamoe_forward(s, s.constant(x), params, dims, mode);
  });
}

Tensor bridge_forward(const Tensor& h, std::span<const int> steps, const BridgeParams& params) {
  return run_inference([&](ad::ParamScope& s) {
    return layers::bridge_forward(s, s.constant(h), steps, params);
  });
}

Tensor bridge_forward(const Tensor& h, int step, const BridgeParams& params) {
  const int steps[] = {step};
  return bridge_forward(h, steps, params);
}

Tensor fusion_moe_forward(const Tensor& features, const FusionMoEParams& params,
                          const Tensor* forced_gates) {
  return run_inference([&](ad::ParamScope& s) {
    return layers::fusion_moe_forward(s, s.constant(features), params, forced_gates);
  });
}

Tensor fusion_gates(const Tensor& features, const FusionMoEParams& params) {
  return ops::softmax(
      ops::linear(ops::mean_last_axis(features), params.router.weight, params.router.bias));
}

}  // namespace rfamoe
