#pragma once

#include <cstdint>
#include <random>

#include "rfamoe/tensor.hpp"

namespace rfamoe {

/// Seedable generator that can fork independent, reproducible child streams.
/// Children depend only on (seed, stream id), never on how many draws the
/// parent has made.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

  std::uint64_t seed() const noexcept { return seed_; }

  Rng split(std::uint64_t stream) const {
    return Rng(mix(seed_ ^ mix(stream + 0x9E3779B97F4A7C15ULL)));
  }

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [lo, hi] inclusive.
  std::size_t uniform_index(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }

  Tensor normal_tensor(const Shape& shape) {
    Tensor t(shape);
    for (auto& v : t.data()) v = normal();
    return t;
  }

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    // splitmix64 finalizer
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace rfamoe
