#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "rfamoe/config.hpp"
#include "rfamoe/kshot_theorem.hpp"
#include "rfamoe/metrics.hpp"

namespace rfamoe {

/// Parameters plus SGD momentum buffers (same order as for_each_param).
struct TrainState {
  BackboneParams params;
  std::vector<Tensor> velocity;
  std::size_t step = 0;  // completed steps
};

TrainState init_train_state(const RunConfig& cfg);

struct TrainProgress {
  std::size_t step;
  double loss;
};

/// Runs steps state.step+1 .. cfg.train_steps. Batch composition, mask and
/// noise of step s depend only on (cfg.seed, s), so a resumed run continues an
/// unbroken one exactly. Throws NumericError naming the step on a non-finite
/// loss.
std::vector<TrainProgress> train(TrainState& state, const Tensor& data, const RunConfig& cfg,
                                 const std::function<void(const TrainProgress&)>& on_step = {});

NamedTensors checkpoint_records(const TrainState& state);
TrainState restore_train_state(const RunConfig& cfg, const NamedTensors& records);
void save_train_state(const std::filesystem::path& path, const TrainState& state);
TrainState load_train_state(const std::filesystem::path& path, const RunConfig& cfg);

void write_loss_csv(std::ostream& out, const std::vector<TrainProgress>& losses);

/// Condition for a batch: mask from cfg.mask (with its own seed) and x_bar.
struct Imputation {
  Tensor mask;
  Tensor condition;
  Tensor reconstruction;
};

Imputation impute(const BackboneParams& params, const RunConfig& cfg, const Tensor& truth,
                  const Tensor& mask, std::uint64_t seed);

struct KShotRow {
  std::size_t k = 0;
  SampleMetrics metrics;  // aggregate over samples, missing region
  double wall_seconds = 0;
};

std::vector<KShotRow> compare_kshot(const BackboneParams& params, const RunConfig& cfg,
                                    const Tensor& truth, const Tensor& mask, std::uint64_t seed);
void write_kshot_csv(std::ostream& out, const std::vector<KShotRow>& rows, bool timing = true);

}  // namespace rfamoe

namespace rfamoe {

struct CheckRow {
  std::string name;
  double value = 0;      // worst observed statistic
  double tolerance = 0;
  bool pass = false;
};

/// Randomized checks of the reverse-step convexity identity, Jensen margins,
/// the weight-sweep grid oracle and nested expert-count monotonicity. The
/// expert pool comes from `params`' head with each expert pinned in turn.
std::vector<CheckRow> theorem_checks(const BackboneParams& params, const RunConfig& cfg,
                                     const Tensor& signals, std::uint64_t seed);
void write_check_csv(std::ostream& out, const std::vector<CheckRow>& rows);

/// Noise estimates of every head expert at (x_t, t), one per pinned expert.
std::vector<Tensor> head_expert_estimates(const BackboneParams& params, const Tensor& x_t,
                                          const Tensor& x_bar, int t);

/// Gradient-check report for a tiny backbone (L=4, depth=1, K=2, T=16): one
/// row per parameter tensor plus one for the inputs.
std::vector<CheckRow> backbone_gradcheck(std::uint64_t seed, double tolerance = 1e-4);

}  // namespace rfamoe
