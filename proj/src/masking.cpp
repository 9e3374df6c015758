#include "rfamoe/masking.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

#include "rfamoe/diffusion.hpp"

namespace rfamoe {

std::string to_string(MaskKind kind) { return kind == MaskKind::random ? "random" : "continuous"; }

MaskKind parse_mask_kind(const std::string& text) {
  if (text == "random") return MaskKind::random;
  if (text == "continuous") return MaskKind::continuous;
  throw std::invalid_argument("unknown mask kind '" + text + "' (expected random or continuous)");
}

Tensor random_mask(std::size_t batch, std::size_t channels, std::size_t length, double ratio,
                   Rng& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw std::invalid_argument("mask ratio must lie in [0, 1], got " + std::to_string(ratio));
  }
  Tensor m({batch, channels, length}, 1.0);
  for (auto& v : m.data())
    if (rng.bernoulli(ratio)) v = 0.0;
  return m;
}

Tensor continuous_mask(std::size_t batch, std::size_t channels, std::size_t length,
                       std::size_t drop_length, std::size_t drop_channels, Rng& rng,
                       bool shared_window) {
  if (drop_length == 0 || drop_length > length) {
    throw std::invalid_argument("drop_length must lie in 1.." + std::to_string(length) + ", got " +
                                std::to_string(drop_length));
  }
  if (drop_channels == 0 || drop_channels > channels) {
    throw std::invalid_argument("drop_channels must lie in 1.." + std::to_string(channels) +
                                ", got " + std::to_string(drop_channels));
  }
  Tensor m({batch, channels, length}, 1.0);
  std::vector<std::size_t> order(channels);
  for (std::size_t b = 0; b < batch; ++b) {
    std::iota(order.begin(), order.end(), 0);
    // Partial Fisher-Yates: the first drop_channels entries are a uniform subset.
    for (std::size_t i = 0; i < drop_channels; ++i) {
      std::swap(order[i], order[rng.uniform_index(i, channels - 1)]);
    }
    const std::size_t shared_start = rng.uniform_index(0, length - drop_length);
    for (std::size_t i = 0; i < drop_channels; ++i) {
      const std::size_t start =
          shared_window ? shared_start : rng.uniform_index(0, length - drop_length);
      for (std::size_t t = start; t < start + drop_length; ++t) m.at(b, order[i], t) = 0.0;
    }
  }
  return m;
}

Tensor make_mask(const MaskSpec& spec, std::size_t batch, std::size_t channels, std::size_t length) {
  Rng rng(spec.seed);
  if (spec.kind == MaskKind::random) return random_mask(batch, channels, length, spec.ratio, rng);
  return continuous_mask(batch, channels, length, spec.drop_length, spec.drop_channels, rng,
                         spec.shared_window);
}

Tensor apply_mask(const Tensor& x, const Tensor& mask) {
  require_same_shape(x, mask, "apply_mask");
  require_binary_mask(mask);
  return hadamard(x, mask);
}

}  // namespace rfamoe
