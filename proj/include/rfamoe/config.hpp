#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "rfamoe/backbone.hpp"
#include "rfamoe/diffusion.hpp"
#include "rfamoe/masking.hpp"

namespace rfamoe {

struct SyntheticConfig {
  std::size_t n_samples = 64;
  std::size_t channels = 3;
  std::size_t length = 256;
  double f_min = 3.0;  // cycles per window
  double f_max = 9.0;
  std::size_t harmonics = 3;
  double spike_prob = 0.5;  // chance a channel carries a pulse train
  double amp_jitter = 0.3;
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;

  bool operator==(const SyntheticConfig&) const = default;
  void validate() const;
};

struct RunConfig {
  // schedule
  int steps = 10;
  double beta_start = 1e-4;
  double beta_end = 0.5;
  // backbone
  std::size_t width = 16;
  std::size_t depth = 1;
  std::vector<std::size_t> kernels = {3, 5, 7, 9, 11};
  std::size_t head_experts = 4;
  std::size_t d_emb = 64;
  GateMode gate = GateMode::renormalized;
  // optimizer
  double learning_rate = 0.01;
  double momentum = 0.9;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
  std::size_t train_steps = 500;
  std::size_t batch_size = 8;
  // masking
  MaskSpec mask;
  // data
  SyntheticConfig synth;
  std::size_t test_samples = 20;
  // evaluation
  std::vector<std::size_t> kshot_list = {1, 4};
  std::size_t error_channel = 0;
  std::size_t error_shots = 12;
  // seeds and paths
  std::uint64_t seed = 0;
  std::string data_path;
  std::string checkpoint_path;

  bool operator==(const RunConfig&) const = default;

  static RunConfig toy();
  static RunConfig full();

  BackboneConfig backbone() const;
  NoiseSchedule schedule() const;
  void validate() const;
};

/// Flat key=value lines; '#' starts a comment. A leading `profile=toy|full`
/// selects the defaults the remaining keys override.
RunConfig parse_config(std::istream& in, const std::string& origin = "<config>");
RunConfig load_config(const std::filesystem::path& path);
void write_config(std::ostream& out, const RunConfig& cfg);
std::string to_config_string(const RunConfig& cfg);

}  // namespace rfamoe
