#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rfamoe/diffusion.hpp"

namespace rfamoe {

// ---- K-shot averaging ------------------------------------------------------

struct ShotEnsemble {
  std::vector<Tensor> shots;
  std::vector<std::uint64_t> seeds;

  Tensor mean() const;
};

/// One full sampler run per seed.
ShotEnsemble kshot_sample(const NoiseEstimator& estimate, const Tensor& x_bar,
                          const NoiseSchedule& sched, std::span<const std::uint64_t> seeds);
/// K shots seeded seed, seed+1, ..., seed+K-1.
ShotEnsemble kshot_sample(const BackboneParams& params, const Tensor& x_bar,
                          const NoiseSchedule& sched, std::size_t k, std::uint64_t seed,
                          const EstimateOptions& options = {});
Tensor kshot_average(const BackboneParams& params, const Tensor& x_bar, const NoiseSchedule& sched,
                     std::size_t k, std::uint64_t seed);

// ---- convex losses ---------------------------------------------------------

/// Mean over entries of phi(residual). `table` is a convex piecewise-linear phi
/// through sorted knots, extended linearly past both ends.
class ConvexLoss {
 public:
  enum class Kind { mse, mae, table };

  static ConvexLoss mse() { return ConvexLoss(Kind::mse); }
  static ConvexLoss mae() { return ConvexLoss(Kind::mae); }
  static ConvexLoss table(std::vector<double> knots, std::vector<double> values);

  Kind kind() const noexcept { return kind_; }
  double phi(double r) const;
  /// A subgradient of phi at r.
  double dphi(double r) const;
  double operator()(const Tensor& residual) const;
  /// Subgradient of the mean loss with respect to each residual entry.
  Tensor gradient(const Tensor& residual) const;

 private:
  explicit ConvexLoss(Kind kind) : kind_(kind) {}
  Kind kind_;
  std::vector<double> knots_;
  std::vector<double> values_;
};

std::string to_string(ConvexLoss::Kind kind);
ConvexLoss parse_convex_loss(const std::string& text);

// ---- reverse-step convexity checks -----------------------------------------

/// Throws unless weights are nonnegative and sum to 1 (within 1e-9).
void require_simplex(std::span<const double> weights);

Tensor weighted_sum(std::span<const Tensor> tensors, std::span<const double> weights);

/// max |reverse_step(x_t, sum w_k eps_k) - sum w_k reverse_step(x_t, eps_k)|
/// with one injected draw z shared by all branches.
double verify_convex_combination(const Tensor& x_t, std::span<const Tensor> eps,
                                 std::span<const double> weights, int t,
                                 const NoiseSchedule& sched, const Tensor& z);

/// sum_k w_k L(p_k - target) - L(sum_k w_k p_k - target). Jensen says >= 0.
double jensen_check(std::span<const Tensor> points, std::span<const double> weights,
                    const Tensor& target, const ConvexLoss& loss);

struct SweepOptions {
  double grid_resolution = 0.05;  // grid mode, K <= grid_max_experts
  std::size_t grid_max_experts = 4;
  int pgd_iterations = 200;
  double pgd_step = 0.1;
  std::optional<std::vector<double>> warm_start;
};

struct SweepResult {
  std::vector<double> best_weights;
  double best_loss = 0;
  double uniform_loss = 0;
  std::size_t evaluations = 0;
};

/// Minimizes loss(reverse_step(x_t, sum w_k eps_k, t, z) - target) over the
/// simplex. The uniform weights and any warm start are always candidates.
SweepResult weight_sweep(std::span<const Tensor> expert_eps, const Tensor& x_t, int t,
                         const NoiseSchedule& sched, const Tensor& z, const Tensor& target,
                         const ConvexLoss& loss, const SweepOptions& options = {});

/// Every point of the simplex grid with spacing 1/divisions.
std::vector<std::vector<double>> simplex_grid(std::size_t k, std::size_t divisions);

/// Euclidean projection onto the probability simplex.
std::vector<double> project_to_simplex(std::vector<double> v);

struct ExpertCountRow {
  std::size_t experts = 0;
  SweepResult sweep;
};

/// weight_sweep on the nested pools eps[0..K) for each K in `counts`
/// (ascending), warm-starting each from the previous optimum.
std::vector<ExpertCountRow> expert_count_sweep(std::span<const Tensor> pool,
                                               std::span<const std::size_t> counts,
                                               const Tensor& x_t, int t,
                                               const NoiseSchedule& sched, const Tensor& z,
                                               const Tensor& target, const ConvexLoss& loss,
                                               const SweepOptions& options = {});

// ---- error distribution ----------------------------------------------------

struct ErrorTable {
  std::vector<std::string> columns;        // shot_0 .. shot_{K-1}, fused
  std::vector<std::vector<double>> rows;   // one per timestamp
};

/// Signed error (reconstruction - truth) per timestamp of one channel of one
/// sample, for each reconstruction and for the fused output. Without `fused`,
/// the fused output is the mean of the reconstructions.
ErrorTable error_distribution(std::span<const Tensor> reconstructions, const Tensor& truth,
                              std::size_t channel, std::size_t sample = 0,
                              const Tensor* fused = nullptr);

void write_error_table_csv(std::ostream& out, const ErrorTable& table);

}  // namespace rfamoe
