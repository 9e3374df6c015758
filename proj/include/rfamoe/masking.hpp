#pragma once

#include <cstdint>
#include <string>

#include "rfamoe/rng.hpp"
#include "rfamoe/tensor.hpp"

namespace rfamoe {

enum class MaskKind { random, continuous };

std::string to_string(MaskKind kind);
MaskKind parse_mask_kind(const std::string& text);

/// 1 = observed, 0 = missing.
struct MaskSpec {
  MaskKind kind = MaskKind::random;
  double ratio = 0.3;              // random: probability an entry is missing
  std::size_t drop_length = 300;   // continuous: run length
  std::size_t drop_channels = 1;   // continuous: channels hit per sample
  bool shared_window = false;      // continuous: one start shared by the chosen channels
  std::uint64_t seed = 0;

  bool operator==(const MaskSpec&) const = default;
};

Tensor random_mask(std::size_t batch, std::size_t channels, std::size_t length, double ratio,
                   Rng& rng);

/// Per sample, zeroes one run of `drop_length` in each of `drop_channels`
/// distinct channels. Runs start independently unless `shared_window`.
Tensor continuous_mask(std::size_t batch, std::size_t channels, std::size_t length,
                       std::size_t drop_length, std::size_t drop_channels, Rng& rng,
                       bool shared_window = false);

/// Builds the mask described by `spec` from its own seed.
Tensor make_mask(const MaskSpec& spec, std::size_t batch, std::size_t channels, std::size_t length);

Tensor apply_mask(const Tensor& x, const Tensor& mask);

}  // namespace rfamoe
