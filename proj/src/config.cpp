#include "rfamoe/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>
#include <tuple>

namespace rfamoe {

void SyntheticConfig::validate() const {
  if (n_samples == 0 || channels == 0 || length < 2) {
    throw std::invalid_argument("synthetic data needs n_samples, channels >= 1 and length >= 2");
  }
  if (!(f_min > 0 && f_min <= f_max)) {
    throw std::invalid_argument("synthetic frequencies need 0 < f_min <= f_max");
  }
  if (harmonics == 0) throw std::invalid_argument("synthetic harmonics must be >= 1");
  if (!(spike_prob >= 0 && spike_prob <= 1)) {
    throw std::invalid_argument("spike_prob must lie in [0, 1]");
  }
  if (!(amp_jitter >= 0 && amp_jitter < 1)) throw std::invalid_argument("amp_jitter must lie in [0, 1)");
  if (!(noise_sigma >= 0)) throw std::invalid_argument("noise_sigma must be >= 0");
}

RunConfig RunConfig::toy() {
  RunConfig c;
  c.mask.kind = MaskKind::continuous;
  c.mask.drop_length = 26;
  c.mask.drop_channels = 1;
  c.mask.ratio = 0.1;
  return c;
}

RunConfig RunConfig::full() {
  RunConfig c = toy();
  c.steps = 40;
  c.beta_end = 0.05;
  c.width = 160;
  c.depth = 3;
  c.kernels = odd_kernel_ladder(15);
  c.head_experts = 16;
  c.batch_size = 6;
  c.synth.channels = 12;
  c.synth.length = 1000;
  c.synth.n_samples = 1000;
  c.train_steps = 120 * (1000 / 6);
  c.mask.drop_length = 300;
  c.kshot_list = {1, 6, 12};
  return c;
}

BackboneConfig RunConfig::backbone() const {
  BackboneConfig b;
  b.channels = synth.channels;
  b.width = width;
  b.depth = depth;
  b.kernels = kernels;
  b.head_experts = head_experts;
  b.d_emb = d_emb;
  b.gate = gate;
  return b;
}

NoiseSchedule RunConfig::schedule() const { return make_schedule(steps, beta_start, beta_end); }

void RunConfig::validate() const {
  backbone().validate();
  synth.validate();
  (void)schedule();
  if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
  if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (!(grad_clip >= 0)) throw std::invalid_argument("grad_clip must be >= 0");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (kshot_list.empty()) throw std::invalid_argument("kshot_list must name at least one K");
  for (auto k : kshot_list)
    if (k == 0) throw std::invalid_argument("kshot_list entries must be >= 1");
  if (error_shots == 0) throw std::invalid_argument("error_shots must be >= 1");
  if (mask.kind == MaskKind::continuous &&
      (mask.drop_length > synth.length || mask.drop_channels > synth.channels)) {
    throw std::invalid_argument("continuous mask exceeds the signal (drop_length <= length, "
                                "drop_channels <= channels)");
  }
  if (!data_path.empty() && data_path == checkpoint_path) {
    throw std::invalid_argument("data_path and checkpoint_path must differ");
  }
}

namespace {

std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

template <typename T>
T parse_number(const std::string& text, const std::string& key) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw std::invalid_argument("config key '" + key + "': cannot parse '" + text + "'");
  }
  return value;
}

double parse_real(const std::string& text, const std::string& key) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || text.empty()) {
    throw std::invalid_argument("config key '" + key + "': cannot parse '" + text + "' as a number");
  }
  return v;
}

std::vector<std::size_t> parse_list(const std::string& text, const std::string& key) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<std::size_t>(item, key));
  if (out.empty()) throw std::invalid_argument("config key '" + key + "': empty list");
  return out;
}

bool parse_bool(const std::string& text, const std::string& key) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw std::invalid_argument("config key '" + key + "': expected true or false, got '" + text + "'");
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define RF_SIZE(name, expr)                                                              \
  {name, Field{[](const RunConfig& c) { return std::to_string(c.expr); },               \
               [](RunConfig& c, const std::string& v) {                                  \
                 c.expr = parse_number<std::remove_reference_t<decltype(c.expr)>>(v, name); \
               }}}
#define RF_REAL(name, expr)                                                    \
  {name, Field{[](const RunConfig& c) { return format_double(c.expr); },      \
               [](RunConfig& c, const std::string& v) { c.expr = parse_real(v, name); }}}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      RF_SIZE("steps", steps),
      RF_REAL("beta_start", beta_start),
      RF_REAL("beta_end", beta_end),
      RF_SIZE("width", width),
      RF_SIZE("depth", depth),
      {"kernels", Field{[](const RunConfig& c) { return join(c.kernels); },
                        [](RunConfig& c, const std::string& v) { c.kernels = parse_list(v, "kernels"); }}},
      RF_SIZE("head_experts", head_experts),
      RF_SIZE("d_emb", d_emb),
      {"gate_mode", Field{[](const RunConfig& c) { return to_string(c.gate); },
                          [](RunConfig& c, const std::string& v) { c.gate = parse_gate_mode(v); }}},
      RF_REAL("learning_rate", learning_rate),
      RF_REAL("momentum", momentum),
      RF_REAL("grad_clip", grad_clip),
      RF_SIZE("train_steps", train_steps),
      RF_SIZE("batch_size", batch_size),
      {"mask_kind", Field{[](const RunConfig& c) { return to_string(c.mask.kind); },
                          [](RunConfig& c, const std::string& v) { c.mask.kind = parse_mask_kind(v); }}},
      RF_REAL("mask_ratio", mask.ratio),
      RF_SIZE("drop_length", mask.drop_length),
      RF_SIZE("drop_channels", mask.drop_channels),
      {"shared_window", Field{[](const RunConfig& c) { return std::string(c.mask.shared_window ? "true" : "false"); },
                              [](RunConfig& c, const std::string& v) { c.mask.shared_window = parse_bool(v, "shared_window"); }}},
      RF_SIZE("mask_seed", mask.seed),
      RF_SIZE("n_samples", synth.n_samples),
      RF_SIZE("channels", synth.channels),
      RF_SIZE("length", synth.length),
      RF_REAL("f_min", synth.f_min),
      RF_REAL("f_max", synth.f_max),
      RF_SIZE("harmonics", synth.harmonics),
      RF_REAL("spike_prob", synth.spike_prob),
      RF_REAL("amp_jitter", synth.amp_jitter),
      RF_REAL("noise_sigma", synth.noise_sigma),
      RF_SIZE("synth_seed", synth.seed),
      RF_SIZE("test_samples", test_samples),
      {"kshot_list", Field{[](const RunConfig& c) { return join(c.kshot_list); },
                           [](RunConfig& c, const std::string& v) { c.kshot_list = parse_list(v, "kshot_list"); }}},
      RF_SIZE("error_channel", error_channel),
      RF_SIZE("error_shots", error_shots),
      RF_SIZE("seed", seed),
      {"data_path", Field{[](const RunConfig& c) { return c.data_path; },
                          [](RunConfig& c, const std::string& v) { c.data_path = v; }}},
      {"checkpoint_path", Field{[](const RunConfig& c) { return c.checkpoint_path; },
                                [](RunConfig& c, const std::string& v) { c.checkpoint_path = v; }}},
  };
  return table;
}

#undef RF_SIZE
#undef RF_REAL

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig parse_config(std::istream& in, const std::string& origin) {
  std::vector<std::tuple<std::size_t, std::string, std::string>> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": expected key=value");
    }
    entries.emplace_back(lineno, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }

  RunConfig cfg = RunConfig::toy();
  for (const auto& [no, key, value] : entries) {
    if (key != "profile") continue;
    if (value == "toy") cfg = RunConfig::toy();
    else if (value == "full") cfg = RunConfig::full();
    else throw std::invalid_argument(origin + ":" + std::to_string(no) + ": unknown profile '" + value + "'");
  }
  std::set<std::string> seen;
  for (const auto& [no, key, value] : entries) {
    if (key == "profile") continue;
    const auto where = origin + ":" + std::to_string(no) + ": ";
    if (!seen.insert(key).second) throw std::invalid_argument(where + "duplicate key '" + key + "'");
    const auto& table = fields();
    auto it = std::find_if(table.begin(), table.end(), [&](const auto& f) { return f.first == key; });
    if (it == table.end()) throw std::invalid_argument(where + "unknown key '" + key + "'");
    try {
      it->second.set(cfg, value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(where + "key '" + key + "': " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  return parse_config(in, path.string());
}

void write_config(std::ostream& out, const RunConfig& cfg) {
  for (const auto& [key, field] : fields()) out << key << '=' << field.get(cfg) << '\n';
}

std::string to_config_string(const RunConfig& cfg) {
  std::ostringstream out;
  write_config(out, cfg);
  return out.str();
}

}  // namespace rfamoe
