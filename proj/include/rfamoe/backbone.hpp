#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rfamoe/moe_blocks.hpp"

namespace rfamoe {

struct BackboneConfig {
  std::size_t channels = 3;    // C
  std::size_t width = 16;      // L
  std::size_t depth = 3;       // levels
  std::vector<std::size_t> kernels = {3, 5, 7, 9, 11};
  std::size_t head_experts = 4;  // K
  std::size_t d_emb = 64;
  GateMode gate = GateMode::renormalized;

  void validate() const;
};

struct LevelParams {
  RFAMoEParams main;
  RFAMoEParams cond;
  BridgeParams bridge;
};

/// Two parallel hierarchies (noisy signal and masked condition), a FiLM
/// bridge per level injecting condition features into the main path, and a
/// Fusion MoE head producing the noise estimate.
struct BackboneParams {
  BackboneConfig config;
  ConvParams lift_xt;    // [L, 1, 1]
  ConvParams lift_cond;  // [L, 1, 1]
  std::vector<LevelParams> levels;
  FusionMoEParams head;
};

BackboneParams init_backbone(const BackboneConfig& config, Rng& rng);

template <typename Params, typename Fn>
void for_each_param(Params& p, Fn&& fn) {
  for_each_conv(p.lift_xt, "lift_xt.", fn);
  for_each_conv(p.lift_cond, "lift_cond.", fn);
  for (std::size_t i = 0; i < p.levels.size(); ++i) {
    const std::string prefix = "levels." + std::to_string(i) + ".";
    for_each_param_rfamoe(p.levels[i].main, prefix + "main.", fn);
    for_each_param_rfamoe(p.levels[i].cond, prefix + "cond.", fn);
    for_each_param_bridge(p.levels[i].bridge, prefix + "bridge.", fn);
  }
  for_each_param_fusion(p.head, "head.", fn);
}

std::size_t param_count(const BackboneParams& params);

struct EstimateOptions {
  /// Pins the head to one expert (one-hot gates) instead of its router.
  std::optional<std::size_t> fixed_head_expert;
  /// Fixed head gates shared by every feature map, length K.
  std::optional<std::vector<double>> head_gates;
};

/// x_t, x_bar: [B, C, T]. `steps` has one entry per batch row, or a single
/// entry shared by all rows. Returns the noise estimate, [B, C, T].
Tensor noise_estimate(const Tensor& x_t, const Tensor& x_bar, std::span<const int> steps,
                      const BackboneParams& params, const EstimateOptions& options = {});
Tensor noise_estimate(const Tensor& x_t, const Tensor& x_bar, int step,
                      const BackboneParams& params, const EstimateOptions& options = {});

namespace layers {
ad::Var noise_estimate(ad::ParamScope& scope, ad::Var x_t, ad::Var x_bar,
                       std::span<const int> steps, const BackboneParams& params,
                       const EstimateOptions& options = {});
}  // namespace layers

// ---- checkpoints -----------------------------------------------------------

/// CKP1: "CKP1", u32 record count, then per record u16 name length, UTF-8
/// name, TSB1 tensor.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& records);
NamedTensors load_checkpoint(const std::filesystem::path& path);
void write_checkpoint(std::ostream& out, const NamedTensors& records);
NamedTensors read_checkpoint(std::istream& in);

NamedTensors export_params(const BackboneParams& params);
/// Fills a parameter set shaped by `config` from checkpoint records. Every
/// parameter must be present with a matching shape; records outside the
/// parameter namespace (e.g. optimizer state) are ignored.
BackboneParams import_params(const BackboneConfig& config, const NamedTensors& records);

}  // namespace rfamoe
