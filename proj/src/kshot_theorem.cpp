#include "rfamoe/kshot_theorem.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

namespace rfamoe {

// ---- K-shot averaging ------------------------------------------------------

Tensor ShotEnsemble::mean() const {
  if (shots.empty()) throw std::invalid_argument("empty shot ensemble");
  Tensor acc(shots.front().shape());
  for (const auto& s : shots) acc = acc + s;
  return (1.0 / static_cast<double>(shots.size())) * acc;
}

ShotEnsemble kshot_sample(const NoiseEstimator& estimate, const Tensor& x_bar,
                          const NoiseSchedule& sched, std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw std::invalid_argument("K-shot sampling needs K >= 1");
  ShotEnsemble e;
  for (auto seed : seeds) {
    Rng rng(seed);
    e.shots.push_back(sample(estimate, x_bar, sched, rng));
    e.seeds.push_back(seed);
  }
  return e;
}

ShotEnsemble kshot_sample(const BackboneParams& params, const Tensor& x_bar,
                          const NoiseSchedule& sched, std::size_t k, std::uint64_t seed,
                          const EstimateOptions& options) {
  std::vector<std::uint64_t> seeds(k);
  std::iota(seeds.begin(), seeds.end(), seed);
  return kshot_sample(
      [&](const Tensor& x_t, const Tensor& cond, int t) {
        return noise_estimate(x_t, cond, t, params, options);
      },
      x_bar, sched, seeds);
}

Tensor kshot_average(const BackboneParams& params, const Tensor& x_bar, const NoiseSchedule& sched,
                     std::size_t k, std::uint64_t seed) {
  return kshot_sample(params, x_bar, sched, k, seed).mean();
}

// ---- convex losses ---------------------------------------------------------

ConvexLoss ConvexLoss::table(std::vector<double> knots, std::vector<double> values) {
  if (knots.size() < 2 || knots.size() != values.size()) {
    throw std::invalid_argument("loss table needs >= 2 knots with one value each");
  }
  double prev_slope = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < knots.size(); ++i) {
    if (!(knots[i] > knots[i - 1])) {
      throw std::invalid_argument("loss table knots must be strictly increasing");
    }
    const double slope = (values[i] - values[i - 1]) / (knots[i] - knots[i - 1]);
    if (slope < prev_slope) {
      throw std::invalid_argument("loss table is not convex at knot " + std::to_string(i - 1));
    }
    prev_slope = slope;
  }
  ConvexLoss l(Kind::table);
  l.knots_ = std::move(knots);
  l.values_ = std::move(values);
  return l;
}

double ConvexLoss::phi(double r) const {
  switch (kind_) {
    case Kind::mse: return r * r;
    case Kind::mae: return std::abs(r);
    case Kind::table: break;
  }
  const auto it = std::upper_bound(knots_.begin(), knots_.end(), r);
  std::size_t hi = static_cast<std::size_t>(it - knots_.begin());
  hi = std::clamp<std::size_t>(hi, 1, knots_.size() - 1);
  const std::size_t lo = hi - 1;
  const double slope = (values_[hi] - values_[lo]) / (knots_[hi] - knots_[lo]);
  return values_[lo] + slope * (r - knots_[lo]);
}

double ConvexLoss::dphi(double r) const {
  switch (kind_) {
    case Kind::mse: return 2.0 * r;
    case Kind::mae: return r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0);
    case Kind::table: break;
  }
  const auto it = std::upper_bound(knots_.begin(), knots_.end(), r);
  std::size_t hi = static_cast<std::size_t>(it - knots_.begin());
  hi = std::clamp<std::size_t>(hi, 1, knots_.size() - 1);
  return (values_[hi] - values_[hi - 1]) / (knots_[hi] - knots_[hi - 1]);
}

double ConvexLoss::operator()(const Tensor& residual) const {
  double s = 0;
  for (double r : residual.data()) s += phi(r);
  return s / static_cast<double>(residual.numel());
}

Tensor ConvexLoss::gradient(const Tensor& residual) const {
  Tensor g(residual.shape());
  const double inv = 1.0 / static_cast<double>(residual.numel());
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] = inv * dphi(residual[i]);
  return g;
}

std::string to_string(ConvexLoss::Kind kind) {
  switch (kind) {
    case ConvexLoss::Kind::mse: return "mse";
    case ConvexLoss::Kind::mae: return "mae";
    case ConvexLoss::Kind::table: return "table";
  }
  return "?";
}

ConvexLoss parse_convex_loss(const std::string& text) {
  if (text == "mse") return ConvexLoss::mse();
  if (text == "mae") return ConvexLoss::mae();
  throw std::invalid_argument("unknown loss '" + text + "' (expected mse or mae)");
}

// ---- reverse-step convexity checks -----------------------------------------

void require_simplex(std::span<const double> weights) {
  if (weights.empty()) throw std::invalid_argument("simplex weights are empty");
  double total = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!(weights[i] >= 0.0)) {
      throw std::invalid_argument("simplex weight " + std::to_string(i) + " is negative (" +
                                  std::to_string(weights[i]) + ")");
    }
    total += weights[i];
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("simplex weights sum to " + std::to_string(total) + ", not 1");
  }
}

Tensor weighted_sum(std::span<const Tensor> tensors, std::span<const double> weights) {
  if (tensors.empty() || tensors.size() != weights.size()) {
    throw std::invalid_argument("weighted_sum: need one weight per tensor");
  }
  Tensor acc(tensors.front().shape());
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    require_same_shape(acc, tensors[k], "weighted_sum");
    const auto src = tensors[k].data();
    auto dst = acc.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += weights[k] * src[i];
  }
  return acc;
}

double verify_convex_combination(const Tensor& x_t, std::span<const Tensor> eps,
                                 std::span<const double> weights, int t,
                                 const NoiseSchedule& sched, const Tensor& z) {
  require_simplex(weights);
  if (eps.size() != weights.size()) {
    throw std::invalid_argument("verify_convex_combination: " + std::to_string(eps.size()) +
                                " estimates for " + std::to_string(weights.size()) + " weights");
  }
  const Tensor fused = reverse_step(x_t, weighted_sum(eps, weights), t, sched, z);
  std::vector<Tensor> branches;
  for (const auto& e : eps) branches.push_back(reverse_step(x_t, e, t, sched, z));
  return max_abs_diff(fused, weighted_sum(branches, weights));
}

double jensen_check(std::span<const Tensor> points, std::span<const double> weights,
                    const Tensor& target, const ConvexLoss& loss) {
  require_simplex(weights);
  if (points.size() != weights.size()) {
    throw std::invalid_argument("jensen_check: need one weight per point");
  }
  double mixed_loss = 0;
  for (std::size_t k = 0; k < points.size(); ++k) mixed_loss += weights[k] * loss(points[k] - target);
  return mixed_loss - loss(weighted_sum(points, weights) - target);
}

std::vector<std::vector<double>> simplex_grid(std::size_t k, std::size_t divisions) {
  if (k == 0 || divisions == 0) throw std::invalid_argument("simplex_grid: k and divisions >= 1");
  std::vector<std::vector<double>> out;
  std::vector<std::size_t> parts(k, 0);
  // Enumerate compositions of `divisions` into k ordered nonnegative parts.
  auto recurse = [&](auto&& self, std::size_t i, std::size_t left) -> void {
    if (i + 1 == k) {
      parts[i] = left;
      std::vector<double> w(k);
      for (std::size_t j = 0; j < k; ++j) {
        w[j] = static_cast<double>(parts[j]) / static_cast<double>(divisions);
      }
      out.push_back(std::move(w));
      return;
    }
    for (std::size_t p = 0; p <= left; ++p) {
      parts[i] = p;
      self(self, i + 1, left - p);
    }
  };
  recurse(recurse, 0, divisions);
  return out;
}

std::vector<double> project_to_simplex(std::vector<double> v) {
  std::vector<double> u = v;
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumulative = 0, theta = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    cumulative += u[i];
    const double candidate = (cumulative - 1.0) / static_cast<double>(i + 1);
    if (u[i] - candidate > 0) theta = candidate;
  }
  for (auto& x : v) x = std::max(x - theta, 0.0);
  return v;
}

SweepResult weight_sweep(std::span<const Tensor> expert_eps, const Tensor& x_t, int t,
                         const NoiseSchedule& sched, const Tensor& z, const Tensor& target,
                         const ConvexLoss& loss, const SweepOptions& options) {
  const std::size_t k = expert_eps.size();
  if (k == 0) throw std::invalid_argument("weight_sweep needs at least one expert");

  SweepResult r;
  auto evaluate = [&](std::span<const double> w) {
    ++r.evaluations;
    return loss(reverse_step(x_t, weighted_sum(expert_eps, w), t, sched, z) - target);
  };
  auto consider = [&](const std::vector<double>& w) {
    const double f = evaluate(w);
    if (f < r.best_loss) {
      r.best_loss = f;
      r.best_weights = w;
    }
    return f;
  };

  r.best_weights.assign(k, 1.0 / static_cast<double>(k));
  r.uniform_loss = r.best_loss = evaluate(r.best_weights);
  if (options.warm_start) {
    if (options.warm_start->size() != k) {
      throw std::invalid_argument("weight_sweep: warm start has " +
                                  std::to_string(options.warm_start->size()) + " weights for K=" +
                                  std::to_string(k));
    }
    require_simplex(*options.warm_start);
    consider(*options.warm_start);
  }

  if (k <= options.grid_max_experts) {
    if (!(options.grid_resolution > 0 && options.grid_resolution <= 1)) {
      throw std::invalid_argument("grid resolution must lie in (0, 1]");
    }
    const auto divisions = static_cast<std::size_t>(std::llround(1.0 / options.grid_resolution));
    for (const auto& w : simplex_grid(k, std::max<std::size_t>(divisions, 1))) consider(w);
    return r;
  }

  // Projected (sub)gradient descent from the best candidate so far; steps that
  // do not lower the loss are rejected and halve the step size.
  const double b = reverse_coefficients(sched, t).b;
  std::vector<double> w = r.best_weights;
  double f = r.best_loss, step = options.pgd_step;
  for (int it = 0; it < options.pgd_iterations; ++it) {
    const Tensor residual = reverse_step(x_t, weighted_sum(expert_eps, w), t, sched, z) - target;
    const Tensor g = loss.gradient(residual);
    std::vector<double> cand(k);
    for (std::size_t j = 0; j < k; ++j) {
      double dot = 0;
      const auto e = expert_eps[j].data();
      for (std::size_t i = 0; i < e.size(); ++i) dot += g[i] * e[i];
      cand[j] = w[j] - step * b * dot;
    }
    cand = project_to_simplex(std::move(cand));
    const double fc = evaluate(cand);
    if (fc < f) {
      w = std::move(cand);
      f = fc;
    } else {
      step *= 0.5;
    }
  }
  if (f < r.best_loss) {
    r.best_loss = f;
    r.best_weights = w;
  }
  return r;
}

std::vector<ExpertCountRow> expert_count_sweep(std::span<const Tensor> pool,
                                               std::span<const std::size_t> counts,
                                               const Tensor& x_t, int t,
                                               const NoiseSchedule& sched, const Tensor& z,
                                               const Tensor& target, const ConvexLoss& loss,
                                               const SweepOptions& options) {
  std::vector<ExpertCountRow> rows;
  std::optional<std::vector<double>> previous;
  std::size_t last = 0;
  for (std::size_t k : counts) {
    if (k == 0 || k > pool.size()) {
      throw std::invalid_argument("expert count " + std::to_string(k) + " outside 1.." +
                                  std::to_string(pool.size()));
    }
    if (k <= last) throw std::invalid_argument("expert counts must be strictly ascending");
    SweepOptions opts = options;
    if (previous) {
      previous->resize(k, 0.0);
      opts.warm_start = previous;
    }
    auto sweep = weight_sweep(pool.first(k), x_t, t, sched, z, target, loss, opts);
    previous = sweep.best_weights;
    rows.push_back({k, std::move(sweep)});
    last = k;
  }
  return rows;
}

// ---- error distribution ----------------------------------------------------

ErrorTable error_distribution(std::span<const Tensor> reconstructions, const Tensor& truth,
                              std::size_t channel, std::size_t sample, const Tensor* fused) {
  if (reconstructions.empty()) throw std::invalid_argument("error_distribution: no reconstructions");
  if (truth.rank() != 3) {
    throw ShapeError("error_distribution: truth must be [B,C,T], got " +
                     shape_to_string(truth.shape()));
  }
  if (channel >= truth.dim(1)) {
    throw std::out_of_range("error_distribution: channel " + std::to_string(channel) +
                            " >= C=" + std::to_string(truth.dim(1)));
  }
  if (sample >= truth.dim(0)) {
    throw std::out_of_range("error_distribution: sample " + std::to_string(sample) +
                            " >= B=" + std::to_string(truth.dim(0)));
  }
  for (const auto& r : reconstructions) require_same_shape(r, truth, "error_distribution");

  std::optional<Tensor> mean_owned;
  if (!fused) {
    mean_owned = ShotEnsemble{{reconstructions.begin(), reconstructions.end()}, {}}.mean();
    fused = &*mean_owned;
  }
  require_same_shape(*fused, truth, "error_distribution fused");

  ErrorTable table;
  for (std::size_t k = 0; k < reconstructions.size(); ++k) {
    table.columns.push_back("shot_" + std::to_string(k));
  }
  table.columns.push_back("fused");
  for (std::size_t t = 0; t < truth.dim(2); ++t) {
    std::vector<double> row;
    const double x = truth.at(sample, channel, t);
    for (const auto& r : reconstructions) row.push_back(r.at(sample, channel, t) - x);
    row.push_back(fused->at(sample, channel, t) - x);
    table.rows.push_back(std::move(row));
  }
  return table;
}

void write_error_table_csv(std::ostream& out, const ErrorTable& table) {
  const auto old = out.precision(17);
  out << 't';
  for (const auto& c : table.columns) out << ',' << c;
  out << '\n';
  for (std::size_t t = 0; t < table.rows.size(); ++t) {
    out << t;
    for (double v : table.rows[t]) out << ',' << v;
    out << '\n';
  }
  out.precision(old);
}

}  // namespace rfamoe
