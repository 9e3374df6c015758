#include "rfamoe/diffusion.hpp"

#include <cmath>

namespace rfamoe {

std::size_t NoiseSchedule::index(int t) const {
  if (t < 1 || t > steps) {
    throw std::out_of_range("diffusion step t=" + std::to_string(t) + " outside 1.." +
                            std::to_string(steps));
  }
  return static_cast<std::size_t>(t - 1);
}

NoiseSchedule schedule_from_betas(std::vector<double> betas) {
  if (betas.empty()) throw std::invalid_argument("noise schedule needs at least one step");
  NoiseSchedule s;
  s.steps = static_cast<int>(betas.size());
  double prod = 1.0;
  for (double b : betas) {
    if (!(b >= 0.0 && b < 1.0)) {
      throw std::invalid_argument("beta must lie in [0, 1), got " + std::to_string(b));
    }
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  s.beta = std::move(betas);
  return s;
}

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("schedule steps must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("need 0 < beta_start <= beta_end < 1, got beta_start=" +
                                std::to_string(beta_start) +
                                " beta_end=" + std::to_string(beta_end));
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    betas[static_cast<std::size_t>(i)] = beta_start + frac * (beta_end - beta_start);
  }
  return schedule_from_betas(std::move(betas));
}

ReverseCoefficients reverse_coefficients(const NoiseSchedule& sched, int t) {
  const double beta = sched.beta_at(t), alpha = sched.alpha_at(t), abar = sched.alpha_bar_at(t);
  ReverseCoefficients c;
  c.a = 1.0 / std::sqrt(alpha);
  c.b = abar < 1.0 ? -beta / (std::sqrt(alpha) * std::sqrt(1.0 - abar)) : 0.0;
  c.sigma = t > 1 ? std::sqrt(beta) : 0.0;
  return c;
}

Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  require_same_shape(x0, eps, "forward_noise");
  const double abar = sched.alpha_bar_at(t);
  return std::sqrt(abar) * x0 + std::sqrt(1.0 - abar) * eps;
}

Tensor forward_noise(const Tensor& x0, std::span<const int> steps, const Tensor& eps,
                     const NoiseSchedule& sched) {
  require_same_shape(x0, eps, "forward_noise");
  const std::size_t rows = x0.dim(0);
  if (steps.size() != rows) {
    throw ShapeError("forward_noise: " + std::to_string(steps.size()) + " steps for batch axis 0 of " +
                     std::to_string(rows));
  }
  Tensor out(x0.shape());
  const std::size_t per_row = x0.numel() / rows;
  for (std::size_t r = 0; r < rows; ++r) {
    const double abar = sched.alpha_bar_at(steps[r]);
    const double s0 = std::sqrt(abar), s1 = std::sqrt(1.0 - abar);
    for (std::size_t i = r * per_row; i < (r + 1) * per_row; ++i) {
      out[i] = s0 * x0[i] + s1 * eps[i];
    }
  }
  return out;
}

Tensor reverse_step(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched,
                    const Tensor& z) {
  require_same_shape(x_t, eps_hat, "reverse_step");
  require_same_shape(x_t, z, "reverse_step");
  const auto c = reverse_coefficients(sched, t);
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = c.a * x_t[i] + c.b * eps_hat[i] + c.sigma * z[i];
  }
  return out;
}

void require_binary_mask(const Tensor& mask) {
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    if (mask[i] != 0.0 && mask[i] != 1.0) {
      throw std::invalid_argument("mask must be binary, found " + std::to_string(mask[i]) +
                                  " at flat index " + std::to_string(i));
    }
  }
}

TrainStepResult diffusion_loss(const BackboneParams& params, const Tensor& batch,
                               const Tensor& mask, std::span<const int> steps, const Tensor& eps,
                               const NoiseSchedule& sched) {
  require_same_shape(batch, mask, "train_step");
  require_binary_mask(mask);
  if (!batch.all_finite()) throw NumericError("train_step: batch contains non-finite values");

  const Tensor x_t = forward_noise(batch, steps, eps, sched);
  const Tensor x_bar = hadamard(batch, mask);

  ad::Graph graph;
  ad::ParamScope scope(graph, true);
  const ad::Var loss = ad::mse(layers::noise_estimate(scope, scope.constant(x_t),
                                                      scope.constant(x_bar), steps, params),
                               scope.constant(eps));
  const auto grads = ad::backward(graph, loss.id);

  TrainStepResult result;
  result.loss = loss.value().item();
  for_each_param(params, [&](const std::string& name, const Tensor& p) {
    const ad::Var* v = scope.find(p);
    auto it = v ? grads.find(v->id) : grads.end();
    result.grads.emplace_back(name, it != grads.end() ? it->second : Tensor(p.shape()));
  });
  return result;
}

TrainStepResult train_step(const BackboneParams& params, const Tensor& batch, const Tensor& mask,
                           const NoiseSchedule& sched, Rng& rng) {
  if (batch.rank() != 3) {
    throw ShapeError("train_step: batch must be [B,C,T], got " + shape_to_string(batch.shape()));
  }
  std::vector<int> steps(batch.dim(0));
  for (auto& t : steps) t = static_cast<int>(rng.uniform_index(1, static_cast<std::size_t>(sched.steps)));
  const Tensor eps = rng.normal_tensor(batch.shape());
  return diffusion_loss(params, batch, mask, steps, eps, sched);
}

Tensor sample(const NoiseEstimator& estimate, const Tensor& x_bar, const NoiseSchedule& sched,
              Rng& rng) {
  if (!x_bar.all_finite()) throw NumericError("sample: condition contains non-finite values");
  Tensor x = rng.normal_tensor(x_bar.shape());
  for (int t = sched.steps; t >= 1; --t) {
    const Tensor eps_hat = estimate(x, x_bar, t);
    const Tensor z = t > 1 ? rng.normal_tensor(x.shape()) : Tensor(x.shape());
    x = reverse_step(x, eps_hat, t, sched, z);
  }
  return x;
}

Tensor sample(const BackboneParams& params, const Tensor& x_bar, const NoiseSchedule& sched,
              Rng& rng, const EstimateOptions& options) {
  return sample(
      [&](const Tensor& x_t, const Tensor& cond, int t) {
        return noise_estimate(x_t, cond, t, params, options);
      },
      x_bar, sched, rng);
}

}  // namespace rfamoe
