#include "rfamoe/backbone.hpp"

#include <array>
#include <fstream>
#include <map>

#include "rfamoe/tensor_io.hpp"

namespace rfamoe {

void BackboneConfig::validate() const {
  if (channels == 0) throw std::invalid_argument("backbone: channel count C must be positive");
  if (width == 0 || width % 2 != 0) {
    throw std::invalid_argument("backbone: width L must be even and positive, got " +
                                std::to_string(width));
  }
  if (head_experts == 0) throw std::invalid_argument("backbone: head needs K >= 1 experts");
  if (d_emb == 0 || d_emb % 2 != 0) {
    throw std::invalid_argument("backbone: d_emb must be even, got " + std::to_string(d_emb));
  }
  if (depth > 0 && kernels.empty()) throw std::invalid_argument("backbone: empty kernel ladder");
}

BackboneParams init_backbone(const BackboneConfig& config, Rng& rng) {
  config.validate();
  BackboneParams p;
  p.config = config;
  const std::size_t l = config.width;
  // Pointwise lift from one scalar per time step to L features.
  auto lift = [&] {
    ConvParams c{Tensor({l, 1, 1}), Tensor({l})};
    for (auto& v : c.weight.data()) v = rng.uniform(-1.0, 1.0);
    return c;
  };
  p.lift_xt = lift();
  p.lift_cond = lift();
  for (std::size_t i = 0; i < config.depth; ++i) {
    LevelParams level;
    level.main = init_rfamoe(l, l, config.kernels, config.channels, rng);
    level.cond = init_rfamoe(l, l, config.kernels, config.channels, rng);
    level.bridge = init_bridge(config.d_emb, l, rng);
    p.levels.push_back(std::move(level));
  }
  p.head = init_fusion_moe(l, config.head_experts, rng);
  return p;
}

std::size_t param_count(const BackboneParams& params) {
  std::size_t n = 0;
  for_each_param(params, [&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

namespace layers {

ad::Var noise_estimate(ad::ParamScope& scope, ad::Var x_t, ad::Var x_bar,
                       std::span<const int> steps, const BackboneParams& params,
                       const EstimateOptions& options) {
  const Shape shape = x_t.shape();
  if (shape.size() != 3) {
    throw ShapeError("noise_estimate: x_t must be [B,C,T], got " + shape_to_string(shape));
  }
  if (x_bar.shape() != shape) {
    throw ShapeError("noise_estimate: x_bar shape " + shape_to_string(x_bar.shape()) +
                     " != x_t shape " + shape_to_string(shape));
  }
  const auto& cfg = params.config;
  const std::size_t b = shape[0], c = shape[1], t = shape[2], n = b * c;
  if (c != cfg.channels) {
    throw ShapeError("noise_estimate: channel axis 1 (" + std::to_string(c) +
                     ") != configured C=" + std::to_string(cfg.channels));
  }
  if (steps.size() != 1 && steps.size() != b) {
    throw ShapeError("noise_estimate: need 1 or B=" + std::to_string(b) + " steps, got " +
                     std::to_string(steps.size()));
  }
  const BlockDims dims{b, c};
  auto bind = [&](const Tensor& p) { return scope.bind(p); };

  ad::Var h = ad::conv1d(ad::reshape(x_t, {n, 1, t}), bind(params.lift_xt.weight),
                         bind(params.lift_xt.bias));
  ad::Var hc = ad::conv1d(ad::reshape(x_bar, {n, 1, t}), bind(params.lift_cond.weight),
                          bind(params.lift_cond.bias));
  for (const auto& level : params.levels) {
    hc = rfamoe_forward(scope, hc, level.cond, dims, cfg.gate);
    h = ad::add(rfamoe_forward(scope, h, level.main, dims, cfg.gate),
                bridge_forward(scope, hc, steps, level.bridge));
  }

  std::optional<Tensor> gates;
  if (options.fixed_head_expert && options.head_gates) {
    throw std::invalid_argument("noise_estimate: fixed_head_expert and head_gates are exclusive");
  }
  if (options.head_gates) {
    const std::size_t k = params.head.expert_count();
    if (options.head_gates->size() != k) {
      throw ShapeError("noise_estimate: " + std::to_string(options.head_gates->size()) +
                       " head gates for K=" + std::to_string(k) + " experts");
    }
    gates = Tensor({n, k});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) gates->at(i, j) = (*options.head_gates)[j];
  }
  if (options.fixed_head_expert) {
    const std::size_t k = params.head.expert_count();
    if (*options.fixed_head_expert >= k) {
      throw std::out_of_range("noise_estimate: fixed head expert " +
                              std::to_string(*options.fixed_head_expert) + " >= K=" +
                              std::to_string(k));
    }
    gates = Tensor({n, k});
    for (std::size_t i = 0; i < n; ++i) gates->at(i, *options.fixed_head_expert) = 1.0;
  }
  ad::Var y = fusion_moe_forward(scope, h, params.head, gates ? &*gates : nullptr);
  return ad::reshape(y, shape);
}

}  // namespace layers

Tensor noise_estimate(const Tensor& x_t, const Tensor& x_bar, std::span<const int> steps,
                      const BackboneParams& params, const EstimateOptions& options) {
  ad::Graph graph;
  ad::ParamScope scope(graph, false);
  return layers::noise_estimate(scope, scope.constant(x_t), scope.constant(x_bar), steps, params,
                                options)
      .value();
}

Tensor noise_estimate(const Tensor& x_t, const Tensor& x_bar, int step,
                      const BackboneParams& params, const EstimateOptions& options) {
  const int steps[] = {step};
  return noise_estimate(x_t, x_bar, steps, params, options);
}

// ---- checkpoints -----------------------------------------------------------

namespace {
constexpr std::array<char, 4> kCheckpointMagic = {'C', 'K', 'P', '1'};
}

void write_checkpoint(std::ostream& out, const NamedTensors& records) {
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, tensor] : records) {
    if (name.size() > 0xFFFF) throw DataError("checkpoint record name too long: " + name);
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tsb1(out, tensor);
  }
  if (!out) throw DataError("failed writing checkpoint stream");
}

NamedTensors read_checkpoint(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
    throw DataError("bad checkpoint magic (expected CKP1)");
  }
  const std::uint32_t count = detail::get_u32(in, "checkpoint record count");
  NamedTensors records;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = detail::get_u16(in, "checkpoint name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) {
      throw DataError("truncated checkpoint name in record " + std::to_string(i));
    }
    try {
      records.emplace_back(std::move(name), read_tsb1(in));
    } catch (const DataError& e) {
      throw DataError("checkpoint record " + std::to_string(i) + ": " + e.what());
    }
  }
  return records;
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write_checkpoint(out, records);
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  try {
    return read_checkpoint(in);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

NamedTensors export_params(const BackboneParams& params) {
  NamedTensors out;
  for_each_param(params, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, t); });
  return out;
}

BackboneParams import_params(const BackboneConfig& config, const NamedTensors& records) {
  Rng scratch(0);
  BackboneParams p = init_backbone(config, scratch);
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : records) by_name[name] = &t;
  for_each_param(p, [&](const std::string& name, Tensor& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw DataError("checkpoint is missing parameter " + name +
                      " (does the config match the checkpoint?)");
    }
    if (it->second->shape() != t.shape()) {
      throw DataError("checkpoint parameter " + name + " has shape " +
                      shape_to_string(it->second->shape()) + ", config expects " +
                      shape_to_string(t.shape()));
    }
    t = *it->second;
  });
  return p;
}

}  // namespace rfamoe
