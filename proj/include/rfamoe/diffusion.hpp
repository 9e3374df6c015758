#pragma once

#include <functional>
#include <span>
#include <vector>

#include "rfamoe/backbone.hpp"

namespace rfamoe {

/// Steps are 1-based: beta[t-1] is beta_t.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  double beta_at(int t) const { return beta[index(t)]; }
  double alpha_at(int t) const { return alpha[index(t)]; }
  double alpha_bar_at(int t) const { return alpha_bar[index(t)]; }
  std::size_t index(int t) const;
};

/// Linear beta ramp from beta_start to beta_end.
NoiseSchedule make_schedule(int steps, double beta_start, double beta_end);
/// Arbitrary betas in [0, 1). beta = 0 is allowed so tests can build degenerate
/// schedules with alpha_bar = 1.
NoiseSchedule schedule_from_betas(std::vector<double> betas);

struct ReverseCoefficients {
  double a = 0;
  double b = 0;
  double sigma = 0;
};

ReverseCoefficients reverse_coefficients(const NoiseSchedule& sched, int t);

Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);
/// Per-batch-row steps for [B, ...] tensors.
Tensor forward_noise(const Tensor& x0, std::span<const int> steps, const Tensor& eps,
                     const NoiseSchedule& sched);

/// x_{t-1} = A x_t + B eps_hat + sigma z.
Tensor reverse_step(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched,
                    const Tensor& z);

/// Entries must be exactly 0 or 1.
void require_binary_mask(const Tensor& mask);

struct TrainStepResult {
  double loss = 0;
  NamedTensors grads;  // same order as for_each_param
};

/// Noise-prediction loss with explicit steps (one per batch row) and noise.
TrainStepResult diffusion_loss(const BackboneParams& params, const Tensor& batch,
                               const Tensor& mask, std::span<const int> steps, const Tensor& eps,
                               const NoiseSchedule& sched);

/// Draws t ~ U{1..T} per batch row and eps ~ N(0, I), then evaluates
/// diffusion_loss.
TrainStepResult train_step(const BackboneParams& params, const Tensor& batch, const Tensor& mask,
                           const NoiseSchedule& sched, Rng& rng);

using NoiseEstimator = std::function<Tensor(const Tensor& x_t, const Tensor& x_bar, int t)>;

/// Ancestral sampler from x_T ~ N(0, I) down to x_0; z_1 = 0.
Tensor sample(const NoiseEstimator& estimate, const Tensor& x_bar, const NoiseSchedule& sched,
              Rng& rng);
Tensor sample(const BackboneParams& params, const Tensor& x_bar, const NoiseSchedule& sched,
              Rng& rng, const EstimateOptions& options = {});

}  // namespace rfamoe
