#include "rfamoe/harness.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

namespace rfamoe {

TrainState init_train_state(const RunConfig& cfg) {
  Rng rng = Rng(cfg.seed).split(0);
  TrainState state{init_backbone(cfg.backbone(), rng), {}, 0};
  for_each_param(state.params,
                 [&](const std::string&, const Tensor& p) { state.velocity.emplace_back(p.shape()); });
  return state;
}

namespace {

Tensor gather_batch(const Tensor& data, std::span<const std::size_t> rows) {
  const std::size_t per = data.dim(1) * data.dim(2);
  Tensor out({rows.size(), data.dim(1), data.dim(2)});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(data.data().begin() + rows[i] * per, per, out.data().begin() + i * per);
  }
  return out;
}

Tensor draw_mask(const MaskSpec& spec, const Shape& shape, Rng& rng) {
  if (spec.kind == MaskKind::random) return random_mask(shape[0], shape[1], shape[2], spec.ratio, rng);
  return continuous_mask(shape[0], shape[1], shape[2], spec.drop_length, spec.drop_channels, rng,
                         spec.shared_window);
}

}  // namespace

std::vector<TrainProgress> train(TrainState& state, const Tensor& data, const RunConfig& cfg,
                                 const std::function<void(const TrainProgress&)>& on_step) {
  if (data.rank() != 3 || data.dim(1) != cfg.synth.channels) {
    throw DataError("training data must be [n, C=" + std::to_string(cfg.synth.channels) +
                    ", T], got " + shape_to_string(data.shape()));
  }
  const NoiseSchedule sched = cfg.schedule();
  const std::size_t n = data.dim(0), batch = std::min(cfg.batch_size, n);
  std::vector<TrainProgress> history;
  std::vector<std::size_t> order(n);

  for (std::size_t s = state.step + 1; s <= cfg.train_steps; ++s) {
    Rng rng = Rng(cfg.seed).split(s);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = 0; i < batch; ++i) std::swap(order[i], order[rng.uniform_index(i, n - 1)]);
    const Tensor x = gather_batch(data, std::span(order).first(batch));
    const Tensor mask = draw_mask(cfg.mask, x.shape(), rng);

    auto result = train_step(state.params, x, mask, sched, rng);
    double norm_sq = 0;
    for (const auto& [name, g] : result.grads)
      for (double v : g.data()) norm_sq += v * v;
    if (!std::isfinite(result.loss) || !std::isfinite(norm_sq)) {
      throw NumericError("non-finite training loss at step " + std::to_string(s));
    }
    const double norm = std::sqrt(norm_sq);
    const double scale = cfg.grad_clip > 0 && norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;

    std::size_t i = 0;
    for_each_param(state.params, [&](const std::string&, Tensor& p) {
      Tensor& v = state.velocity[i];
      const auto g = result.grads[i].second.data();
      auto pv = p.data();
      auto vv = v.data();
      for (std::size_t j = 0; j < pv.size(); ++j) {
        vv[j] = cfg.momentum * vv[j] + scale * g[j];
        pv[j] -= cfg.learning_rate * vv[j];
      }
      ++i;
    });
    state.step = s;
    history.push_back({s, result.loss});
    if (on_step) on_step(history.back());
  }
  return history;
}

NamedTensors checkpoint_records(const TrainState& state) {
  NamedTensors records = export_params(state.params);
  const std::size_t n = records.size();
  for (std::size_t i = 0; i < n; ++i) {
    records.emplace_back("optim.momentum." + records[i].first, state.velocity[i]);
  }
  records.emplace_back("optim.step", Tensor::from({static_cast<double>(state.step)}));
  return records;
}

TrainState restore_train_state(const RunConfig& cfg, const NamedTensors& records) {
  TrainState state{import_params(cfg.backbone(), records), {}, 0};
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : records) by_name[name] = &t;
  for_each_param(state.params, [&](const std::string& name, const Tensor& p) {
    auto it = by_name.find("optim.momentum." + name);
    if (it == by_name.end() || it->second->shape() != p.shape()) {
      throw DataError("checkpoint lacks momentum for " + name + "; cannot resume training");
    }
    state.velocity.push_back(*it->second);
  });
  auto step = by_name.find("optim.step");
  if (step == by_name.end() || step->second->numel() != 1) {
    throw DataError("checkpoint lacks optim.step; cannot resume training");
  }
  state.step = static_cast<std::size_t>((*step->second)[0]);
  return state;
}

void save_train_state(const std::filesystem::path& path, const TrainState& state) {
  save_checkpoint(path, checkpoint_records(state));
}

TrainState load_train_state(const std::filesystem::path& path, const RunConfig& cfg) {
  return restore_train_state(cfg, load_checkpoint(path));
}

void write_loss_csv(std::ostream& out, const std::vector<TrainProgress>& losses) {
  const auto old = out.precision(17);
  out << "step,loss\n";
  for (const auto& p : losses) out << p.step << ',' << p.loss << '\n';
  out.precision(old);
}

Imputation impute(const BackboneParams& params, const RunConfig& cfg, const Tensor& truth,
                  const Tensor& mask, std::uint64_t seed) {
  Imputation r{mask, apply_mask(truth, mask), Tensor({1})};
  Rng rng(seed);
  r.reconstruction = sample(params, r.condition, cfg.schedule(), rng);
  return r;
}

std::vector<KShotRow> compare_kshot(const BackboneParams& params, const RunConfig& cfg,
                                    const Tensor& truth, const Tensor& mask, std::uint64_t seed) {
  const Tensor condition = apply_mask(truth, mask);
  const NoiseSchedule sched = cfg.schedule();
  std::vector<KShotRow> rows;
  for (std::size_t k : cfg.kshot_list) {
    const auto start = std::chrono::steady_clock::now();
    const Tensor avg = kshot_sample(params, condition, sched, k, seed).mean();
    const auto stop = std::chrono::steady_clock::now();
    rows.push_back({k, evaluate(truth, avg, &mask).aggregate,
                    std::chrono::duration<double>(stop - start).count()});
  }
  return rows;
}

void write_kshot_csv(std::ostream& out, const std::vector<KShotRow>& rows, bool timing) {
  const auto old = out.precision(12);
  out << "K,prd,ssd,mad,wall_seconds\n";
  for (const auto& r : rows) {
    out << r.k << ',' << r.metrics.prd << ',' << r.metrics.ssd << ',' << r.metrics.mad << ',';
    if (timing) {
      out << r.wall_seconds;
    } else {
      out << "NA";
    }
    out << '\n';
  }
  out.precision(old);
}

}  // namespace rfamoe
