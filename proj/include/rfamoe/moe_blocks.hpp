#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rfamoe/autograd.hpp"
#include "rfamoe/rng.hpp"
#include "rfamoe/tensor.hpp"

// Feature maps are laid out [N, L, T] (feature channel before time) so a
// block's [B, C*L, T] fusion view is a pure reinterpretation of the buffer.
namespace rfamoe {

struct ConvParams {
  Tensor weight;  // [Cout, Cin, S]
  Tensor bias;    // [Cout]
};

struct LinearParams {
  Tensor weight;  // [Dout, Din]
  Tensor bias;    // [Dout]
};

enum class GateMode {
  renormalized,     // selected expert's gate is exactly 1
  raw_probability,  // selected expert scaled by its softmax probability
};

std::string to_string(GateMode mode);
GateMode parse_gate_mode(const std::string& text);

/// Receptive-field adaptive block: per feature map, one convolution expert
/// out of E kernel sizes is chosen by a router, followed by instance norm, a
/// GELU-gated split, and a kernel-1 fusion across all C*L channels of a sample.
struct RFAMoEParams {
  std::vector<ConvParams> experts;  // [L, L_in, S_e]
  LinearParams router;              // [E, L_in]
  Tensor norm_gamma;                // [L]
  Tensor norm_beta;                 // [L]
  ConvParams gate_proj;             // [L, L/2, 1]
  ConvParams fuse;                  // [C*L, C*L, 1]
  std::optional<ConvParams> residual;  // [L, L_in, 1], only when L_in != L

  std::size_t width() const { return norm_gamma.dim(0); }
  std::size_t in_width() const { return router.weight.dim(1); }
  std::size_t expert_count() const { return experts.size(); }
};

/// FiLM generator: step embedding -> (gamma, beta) per feature channel.
struct BridgeParams {
  LinearParams film;  // [2L, D_emb]
};

/// K pointwise experts merged by gate-weighting their weights (dynamic conv).
struct FusionMoEParams {
  std::vector<ConvParams> experts;  // weight [1, L, 1], bias [1]
  LinearParams router;              // [K, L]

  std::size_t expert_count() const { return experts.size(); }
  std::size_t width() const { return router.weight.dim(1); }
};

struct BlockDims {
  std::size_t batch;
  std::size_t channels;
};

RFAMoEParams init_rfamoe(std::size_t in_width, std::size_t width,
                         std::span<const std::size_t> kernels, std::size_t channels, Rng& rng);
BridgeParams init_bridge(std::size_t d_emb, std::size_t width, Rng& rng);
FusionMoEParams init_fusion_moe(std::size_t width, std::size_t experts, Rng& rng);

/// Odd ladder 3, 5, 7, ... of length `count`.
std::vector<std::size_t> odd_kernel_ladder(std::size_t count);

/// Sinusoidal embedding: entry 2i is sin(t / 10000^(2i/D)), entry 2i+1 the cosine.
Tensor step_embedding(int step, std::size_t d_emb);

struct Top1Route {
  std::vector<std::size_t> index;
  std::vector<double> gate;
};

/// Mean-pools features [N, L_in, T] over time, scores experts, keeps the
/// argmax (ties go to the lowest index).
Top1Route route_top1(const Tensor& features, const LinearParams& router,
                     GateMode mode = GateMode::renormalized);
std::vector<std::size_t> argmax_rows(const Tensor& logits);

Tensor rfamoe_forward(const Tensor& x, const RFAMoEParams& params, BlockDims dims,
                      GateMode mode = GateMode::renormalized);
/// `steps` holds one diffusion step per group of rows (see ad::film).
Tensor bridge_forward(const Tensor& h, std::span<const int> steps, const BridgeParams& params);
Tensor bridge_forward(const Tensor& h, int step, const BridgeParams& params);
/// Returns [N, 1, T]. `forced_gates` ([N, K]) replaces the router when given.
Tensor fusion_moe_forward(const Tensor& features, const FusionMoEParams& params,
                          const Tensor* forced_gates = nullptr);
Tensor fusion_gates(const Tensor& features, const FusionMoEParams& params);

namespace layers {

ad::Var rfamoe_forward(ad::ParamScope& scope, ad::Var x, const RFAMoEParams& params,
                       BlockDims dims, GateMode mode);
ad::Var bridge_forward(ad::ParamScope& scope, ad::Var h, std::span<const int> steps,
                       const BridgeParams& params);
ad::Var fusion_moe_forward(ad::ParamScope& scope, ad::Var features,
                           const FusionMoEParams& params, const Tensor* forced_gates);

}  // namespace layers

// Parameter walks. The callback receives a dotted name and the tensor.
template <typename Params, typename Fn>
void for_each_conv(Params& conv, const std::string& prefix, Fn&& fn) {
  fn(prefix + "weight", conv.weight);
  fn(prefix + "bias", conv.bias);
}

template <typename Params, typename Fn>
void for_each_param_rfamoe(Params& p, const std::string& prefix, Fn&& fn) {
  for (std::size_t e = 0; e < p.experts.size(); ++e) {
    for_each_conv(p.experts[e], prefix + "experts." + std::to_string(e) + ".", fn);
  }
  for_each_conv(p.router, prefix + "router.", fn);
  fn(prefix + "norm.gamma", p.norm_gamma);
  fn(prefix + "norm.beta", p.norm_beta);
  for_each_conv(p.gate_proj, prefix + "gate_proj.", fn);
  for_each_conv(p.fuse, prefix + "fuse.", fn);
  if (p.residual) for_each_conv(*p.residual, prefix + "residual.", fn);
}

template <typename Params, typename Fn>
void for_each_param_bridge(Params& p, const std::string& prefix, Fn&& fn) {
  for_each_conv(p.film, prefix + "film.", fn);
}

template <typename Params, typename Fn>
void for_each_param_fusion(Params& p, const std::string& prefix, Fn&& fn) {
  for (std::size_t k = 0; k < p.experts.size(); ++k) {
    for_each_conv(p.experts[k], prefix + "experts." + std::to_string(k) + ".", fn);
  }
  for_each_conv(p.router, prefix + "router.", fn);
}

}  // namespace rfamoe
