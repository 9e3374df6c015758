#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "rfamoe/harness.hpp"
#include "rfamoe/signals.hpp"
#include "rfamoe/tensor_io.hpp"

using namespace rfamoe;
namespace fs = std::filesystem;

namespace {

struct Usage : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

struct MaskFlags {
  std::optional<std::string> kind;
  std::optional<double> ratio;
  std::optional<std::size_t> drop_length, drop_channels;
  std::optional<std::uint64_t> seed;
  bool shared = false;

  void attach(CLI::App* sub) {
    sub->add_option("--mask-kind", kind, "random or continuous");
    sub->add_option("--mask-ratio", ratio, "random mask: missing probability");
    sub->add_option("--drop-length", drop_length, "continuous mask: run length");
    sub->add_option("--drop-channels", drop_channels, "continuous mask: channels per sample");
    sub->add_option("--mask-seed", seed);
    sub->add_flag("--shared-window", shared, "continuous mask: one start for all chosen channels");
  }
  void apply(RunConfig& c) const {
    if (kind) c.mask.kind = parse_mask_kind(*kind);
    if (ratio) c.mask.ratio = *ratio;
    if (drop_length) c.mask.drop_length = *drop_length;
    if (drop_channels) c.mask.drop_channels = *drop_channels;
    if (seed) c.mask.seed = *seed;
    if (shared) c.mask.shared_window = true;
  }
};

RunConfig resolve(const Globals& g, const MaskFlags* mask = nullptr) {
  RunConfig c = g.config.empty() ? RunConfig::toy() : load_config(g.config);
  if (g.seed) c.seed = *g.seed;
  if (mask) mask->apply(c);
  c.validate();
  return c;
}

fs::path out_dir(const Globals& g) {
  fs::create_directories(g.out);
  return g.out;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

void write_resolved(const fs::path& dir, const RunConfig& c) {
  auto out = open_out(dir / "run_config.txt");
  write_config(out, c);
}

SyntheticConfig held_out(const RunConfig& c) {
  SyntheticConfig s = c.synth;
  s.n_samples = c.test_samples;
  s.seed = c.synth.seed + 1000;
  return s;
}

// --data, then data_path, then the held-out synthetic set.
Tensor eval_data(const std::string& flag, const RunConfig& c) {
  const std::string path = flag.empty() ? c.data_path : flag;
  if (path.empty()) return synth_generate(held_out(c));
  return load_signals(path);
}

BackboneParams load_params(const std::string& flag, const RunConfig& c) {
  const std::string path = flag.empty() ? c.checkpoint_path : flag;
  if (path.empty()) throw Usage("no checkpoint: pass --checkpoint or set checkpoint_path");
  return import_params(c.backbone(), load_checkpoint(path));
}

Tensor mask_for(const RunConfig& c, const Tensor& data) {
  return make_mask(c.mask, data.dim(0), data.dim(1), data.dim(2));
}

void write_checks(const fs::path& path, const std::vector<CheckRow>& rows) {
  auto out = open_out(path);
  write_check_csv(out, rows);
  for (const auto& r : rows) {
    if (!r.pass) throw NumericError("check failed: " + r.name);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rfamoe: diffusion imputation with mixture-of-experts noise estimation"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "key=value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "overrides the config seed (synth: the data seed)");
  app.add_option("--out", g.out, "output directory");

  std::string data, checkpoint, resume, format = "tsb1", truth, pred, mask_path;
  bool held = false, centered = false, no_timing = false;
  std::vector<std::size_t> k_list;
  std::optional<std::size_t> train_steps, sample_index, channel, shots, experts;

  auto* synth = app.add_subcommand("synth", "generate synthetic signals");
  synth->add_option("--format", format, "tsb1 or csv")->check(CLI::IsMember({"tsb1", "csv"}));
  synth->add_flag("--held-out", held, "write the held-out evaluation set instead");

  MaskFlags train_mask, impute_mask, kshot_mask, dist_mask;
  auto* train_cmd = app.add_subcommand("train", "train the noise estimator");
  train_cmd->add_option("--data", data, "signals (csv file/dir or .tsb1); default synthetic");
  train_cmd->add_option("--resume", resume, "checkpoint to continue from");
  train_cmd->add_option("--steps", train_steps, "total step count");
  train_mask.attach(train_cmd);

  auto* impute_cmd = app.add_subcommand("impute", "reconstruct masked signals");
  impute_cmd->add_option("--checkpoint", checkpoint);
  impute_cmd->add_option("--data", data);
  impute_mask.attach(impute_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "score a reconstruction");
  eval_cmd->add_option("--truth", truth)->required();
  eval_cmd->add_option("--pred", pred)->required();
  eval_cmd->add_option("--mask", mask_path, "TSB1 mask; scores entries where it is 0");
  eval_cmd->add_flag("--centered", centered, "PRD against mean-removed energy");

  auto* kshot_cmd = app.add_subcommand("compare-kshot", "K-shot averaging table");
  kshot_cmd->add_option("--checkpoint", checkpoint);
  kshot_cmd->add_option("--data", data);
  kshot_cmd->add_option("--k", k_list, "shot counts")->delimiter(',');
  kshot_cmd->add_flag("--no-timing", no_timing, "write NA for wall_seconds");
  kshot_mask.attach(kshot_cmd);

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of the backbone");

  auto* theorem_cmd = app.add_subcommand("theorem-check", "convexity and weight-sweep checks");
  theorem_cmd->add_option("--checkpoint", checkpoint, "expert pool source; default fresh network");
  theorem_cmd->add_option("--experts", experts, "head experts of a fresh network")->check(CLI::PositiveNumber);
  theorem_cmd->add_option("--data", data);

  auto* dist_cmd = app.add_subcommand("error-dist", "per-timestamp shot errors");
  dist_cmd->add_option("--checkpoint", checkpoint);
  dist_cmd->add_option("--data", data);
  dist_cmd->add_option("--sample", sample_index);
  dist_cmd->add_option("--channel", channel);
  dist_cmd->add_option("--shots", shots)->check(CLI::PositiveNumber);
  dist_mask.attach(dist_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) {
      RunConfig c = resolve(g);
      if (g.seed) c.synth.seed = *g.seed;
      const auto dir = out_dir(g);
      const Tensor x = synth_generate(held ? held_out(c) : c.synth);
      if (format == "csv") save_signals(dir / "signals", x, SignalFormat::csv);
      else save_signals(dir / "signals.tsb1", x, SignalFormat::tsb1);
      write_resolved(dir, c);
    } else if (*train_cmd) {
      RunConfig c = resolve(g, &train_mask);
      if (train_steps) c.train_steps = *train_steps;
      const auto dir = out_dir(g);
      const std::string path = data.empty() ? c.data_path : data;
      const Tensor x = path.empty() ? synth_generate(c.synth) : load_signals(path);
      TrainState state = resume.empty() ? init_train_state(c) : load_train_state(resume, c);
      const auto history = train(state, x, c);
      save_train_state(dir / "checkpoint.ckp", state);
      auto out = open_out(dir / "loss.csv");
      write_loss_csv(out, history);
      write_resolved(dir, c);
    } else if (*impute_cmd) {
      const RunConfig c = resolve(g, &impute_mask);
      const auto params = load_params(checkpoint, c);
      const Tensor x = eval_data(data, c);
      const auto dir = out_dir(g);
      const auto r = impute(params, c, x, mask_for(c, x), c.seed);
      save_tsb1(dir / "reconstruction.tsb1", r.reconstruction);
      save_tsb1(dir / "mask.tsb1", r.mask);
      {
        auto out = open_out(dir / "metrics_full.csv");
        write_metrics_csv(out, evaluate(x, r.reconstruction));
      }
      try {
        const auto missing = evaluate(x, r.reconstruction, &r.mask);
        auto out = open_out(dir / "metrics_missing.csv");
        write_metrics_csv(out, missing);
      } catch (const std::invalid_argument& e) {
        std::cerr << "missing-region metrics skipped: " << e.what() << '\n';
      }
      write_resolved(dir, c);
    } else if (*eval_cmd) {
      const Tensor t = load_signals(truth), p = load_signals(pred);
      std::optional<Tensor> m;
      if (!mask_path.empty()) m = load_tsb1(mask_path);
      const auto report = evaluate(t, p, m ? &*m : nullptr, centered);
      auto out = open_out(out_dir(g) / "metrics.csv");
      write_metrics_csv(out, report);
    } else if (*kshot_cmd) {
      RunConfig c = resolve(g, &kshot_mask);
      if (!k_list.empty()) c.kshot_list = k_list;
      c.validate();
      const auto params = load_params(checkpoint, c);
      const Tensor x = eval_data(data, c);
      const auto rows = compare_kshot(params, c, x, mask_for(c, x), c.seed);
      const auto dir = out_dir(g);
      auto out = open_out(dir / "kshot.csv");
      write_kshot_csv(out, rows, !no_timing);
      write_resolved(dir, c);
    } else if (*grad_cmd) {
      const RunConfig c = resolve(g);
      write_checks(out_dir(g) / "gradcheck.csv", backbone_gradcheck(c.seed));
    } else if (*theorem_cmd) {
      RunConfig c = resolve(g);
      std::optional<BackboneParams> params;
      if (!checkpoint.empty() || !c.checkpoint_path.empty()) {
        params = load_params(checkpoint, c);
      } else {
        c.head_experts = experts.value_or(8);
        params = init_train_state(c).params;
      }
      const std::string path = data.empty() ? c.data_path : data;
      const Tensor x = path.empty() ? synth_generate(held_out(c)) : load_signals(path);
      const auto dir = out_dir(g);
      write_resolved(dir, c);
      write_checks(dir / "theorem_check.csv", theorem_checks(*params, c, x, c.seed));
    } else if (*dist_cmd) {
      RunConfig c = resolve(g, &dist_mask);
      if (channel) c.error_channel = *channel;
      if (shots) c.error_shots = *shots;
      const auto params = load_params(checkpoint, c);
      const Tensor x = eval_data(data, c);
      const std::size_t i = sample_index.value_or(0);
      if (i >= x.dim(0)) throw Usage("--sample " + std::to_string(i) + " out of range for " + std::to_string(x.dim(0)) + " samples");
      Tensor one({1, x.dim(1), x.dim(2)});
      const std::size_t per = x.dim(1) * x.dim(2);
      std::copy_n(x.data().begin() + i * per, per, one.data().begin());
      const Tensor mask = mask_for(c, one);
      const auto ensemble = kshot_sample(params, apply_mask(one, mask), c.schedule(), c.error_shots, c.seed);
      const auto table = error_distribution(ensemble.shots, one, c.error_channel);
      const auto dir = out_dir(g);
      auto out = open_out(dir / "error_distribution.csv");
      write_error_table_csv(out, table);
      write_resolved(dir, c);
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const Usage& e) {
    std::cerr << "usage: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const ZeroReferenceError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage: " << e.what() << '\n';
    return 1;
  } catch (const std::out_of_range& e) {
    std::cerr << "usage: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
