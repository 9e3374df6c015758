#include <cmath>
#include <ostream>

#include "rfamoe/gradcheck.hpp"
#include "rfamoe/harness.hpp"

namespace rfamoe {

std::vector<Tensor> head_expert_estimates(const BackboneParams& params, const Tensor& x_t,
                                          const Tensor& x_bar, int t) {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < params.head.expert_count(); ++k) {
    EstimateOptions opt;
    opt.fixed_head_expert = k;
    out.push_back(noise_estimate(x_t, x_bar, t, params, opt));
  }
  return out;
}

namespace {

std::vector<double> random_simplex(std::size_t k, Rng& rng) {
  std::vector<double> w(k);
  double total = 0;
  for (auto& v : w) total += (v = -std::log(1.0 - rng.uniform()));
  for (auto& v : w) v /= total;
  return w;
}

}  // namespace

std::vector<CheckRow> theorem_checks(const BackboneParams& params, const RunConfig& cfg,
                                     const Tensor& signals, std::uint64_t seed) {
  Rng rng(seed);
  const NoiseSchedule sched = cfg.schedule();
  const Shape shape{1, signals.dim(1), signals.dim(2)};
  std::vector<CheckRow> rows;

  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = rng.uniform_index(1, 8);
    std::vector<Tensor> eps;
    for (std::size_t i = 0; i < k; ++i) eps.push_back(rng.normal_tensor(shape));
    const int t = static_cast<int>(rng.uniform_index(1, static_cast<std::size_t>(sched.steps)));
    worst = std::max(worst, verify_convex_combination(rng.normal_tensor(shape), eps,
                                                      random_simplex(k, rng), t, sched,
                                                      rng.normal_tensor(shape)));
  }
  rows.push_back({"convex_combination_max_deviation", worst, 1e-10, worst <= 1e-10});

  for (const auto& loss : {ConvexLoss::mse(), ConvexLoss::mae()}) {
    double lowest = std::numeric_limits<double>::infinity();
    for (int trial = 0; trial < 10000; ++trial) {
      const std::size_t k = rng.uniform_index(1, 6);
      std::vector<Tensor> points;
      for (std::size_t i = 0; i < k; ++i) points.push_back(rng.normal_tensor({16}));
      lowest = std::min(lowest, jensen_check(points, random_simplex(k, rng), rng.normal_tensor({16}), loss));
    }
    rows.push_back({"jensen_min_margin_" + to_string(loss.kind()), lowest, -1e-12, lowest >= -1e-12});
  }

  // Expert pool from the head at a real noisy input.
  const std::size_t row = rng.uniform_index(0, signals.dim(0) - 1);
  const std::size_t per = shape[1] * shape[2];
  Tensor x0(shape);
  std::copy_n(signals.data().begin() + row * per, per, x0.data().begin());
  const Tensor mask = make_mask(cfg.mask, 1, shape[1], shape[2]);
  const Tensor x_bar = apply_mask(x0, mask);
  const int t = static_cast<int>(rng.uniform_index(1, static_cast<std::size_t>(sched.steps)));
  const Tensor eps_true = rng.normal_tensor(shape);
  const Tensor x_t = forward_noise(x0, t, eps_true, sched);
  const Tensor z = t > 1 ? rng.normal_tensor(shape) : Tensor(shape);
  const Tensor target = reverse_step(x_t, eps_true, t, sched, z);
  const auto pool = head_expert_estimates(params, x_t, x_bar, t);

  double gap = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k <= std::min<std::size_t>(pool.size(), 4); ++k) {
    const auto r = weight_sweep(std::span(pool).first(k), x_t, t, sched, z, target, ConvexLoss::mse());
    gap = std::max(gap, r.best_loss - r.uniform_loss);
  }
  rows.push_back({"weight_sweep_best_minus_uniform", gap, 1e-12, gap <= 1e-12});

  std::vector<std::size_t> counts;
  for (std::size_t k = 1; k <= pool.size(); k *= 2) counts.push_back(k);
  const auto sweep = expert_count_sweep(pool, counts, x_t, t, sched, z, target, ConvexLoss::mse());
  double rise = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < sweep.size(); ++i) {
    rise = std::max(rise, sweep[i].sweep.best_loss - sweep[i - 1].sweep.best_loss);
  }
  if (sweep.size() < 2) rise = 0;
  rows.push_back({"expert_count_sweep_max_rise", rise, 1e-12, rise <= 1e-12});
  for (const auto& r : sweep) {
    rows.push_back({"expert_count_sweep_best_loss_K" + std::to_string(r.experts), r.sweep.best_loss,
                    0, true});
  }
  return rows;
}

void write_check_csv(std::ostream& out, const std::vector<CheckRow>& rows) {
  const auto old = out.precision(12);
  out << "check,value,tolerance,pass\n";
  for (const auto& r : rows) {
    out << r.name << ',' << r.value << ',' << r.tolerance << ',' << (r.pass ? "true" : "false") << '\n';
  }
  out.precision(old);
}

std::vector<CheckRow> backbone_gradcheck(std::uint64_t seed, double tolerance) {
  BackboneConfig cfg;
  cfg.channels = 2;
  cfg.width = 4;
  cfg.depth = 1;
  cfg.kernels = {3, 5};
  cfg.head_experts = 2;
  cfg.d_emb = 8;
  Rng rng(seed);
  BackboneParams params = init_backbone(cfg, rng);
  for_each_param(params, [&](const std::string& name, Tensor& p) {
    if (name.ends_with("bias") || name.ends_with("norm.beta"))
      for (auto& v : p.data()) v = 0.1 * rng.normal();
  });
  const Tensor x_t = rng.normal_tensor({2, 2, 16}), x_bar = rng.normal_tensor({2, 2, 16});
  const Tensor eps = rng.normal_tensor({2, 2, 16});
  const int steps[] = {static_cast<int>(rng.uniform_index(1, 10)), static_cast<int>(rng.uniform_index(1, 10))};

  std::vector<CheckRow> rows;
  std::vector<std::pair<std::string, const Tensor*>> entries;
  for_each_param(params, [&](const std::string& name, const Tensor& p) { entries.emplace_back(name, &p); });
  for (const auto& [name, target] : entries) {
    auto f = [&, target = target](ad::Graph& g, ad::Var x) {
      ad::ParamScope scope(g, false);
      scope.alias(*target, x);
      return ad::mse(layers::noise_estimate(scope, scope.constant(x_t), scope.constant(x_bar), steps, params),
                     scope.constant(eps));
    };
    const double err = finite_diff_check(f, *target);
    rows.push_back({name, err, tolerance, err <= tolerance});
  }
  auto f = [&](ad::Graph& g, ad::Var x) {
    ad::ParamScope scope(g, false);
    return ad::mse(layers::noise_estimate(scope, x, scope.constant(x_bar), steps, params), scope.constant(eps));
  };
  const double err = finite_diff_check(f, x_t);
  rows.push_back({"input.x_t", err, tolerance, err <= tolerance});
  return rows;
}

}  // namespace rfamoe
