#include "rfamoe/signals.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <vector>

#include "rfamoe/tensor_io.hpp"

namespace rfamoe {

Tensor synth_generate(const SyntheticConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.n_samples, c = cfg.channels, len = cfg.length;
  Tensor out({n, c, len});
  Rng root(cfg.seed);
  std::vector<double> x(len);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      Rng rng = root.split(s * c + ch);
      const double f = rng.uniform(cfg.f_min, cfg.f_max);
      const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
      const double amp = 1.0 + cfg.amp_jitter * rng.uniform(-1.0, 1.0);
      const bool pulses = rng.bernoulli(cfg.spike_prob);
      const double pulse_offset = rng.uniform();
      for (std::size_t t = 0; t < len; ++t) {
        const double u = static_cast<double>(t) / static_cast<double>(len);
        double v = 0;
        for (std::size_t h = 1; h <= cfg.harmonics; ++h) {
          const double hd = static_cast<double>(h);
          v += amp / hd * std::sin(2 * std::numbers::pi * hd * f * u + hd * phase);
        }
        if (pulses) {
          // Narrow Gaussian pulse once per cycle, like an R peak.
          const double cyc = f * u + pulse_offset;
          const double d = (cyc - std::round(cyc)) / f * static_cast<double>(len);
          v += 2.0 * amp * std::exp(-0.5 * d * d / 2.25);
        }
        x[t] = v + cfg.noise_sigma * rng.normal();
      }
      double mean = 0, var = 0;
      for (double v : x) mean += v;
      mean /= static_cast<double>(len);
      for (double v : x) var += (v - mean) * (v - mean);
      const double sd = std::sqrt(var / static_cast<double>(len));
      for (std::size_t t = 0; t < len; ++t) out.at(s, ch, t) = sd > 0 ? (x[t] - mean) / sd : 0.0;
    }
  }
  return out;
}

SignalFormat parse_signal_format(const std::string& text) {
  if (text == "auto") return SignalFormat::automatic;
  if (text == "csv") return SignalFormat::csv;
  if (text == "tsb1") return SignalFormat::tsb1;
  throw std::invalid_argument("unknown signal format '" + text + "' (expected auto, csv or tsb1)");
}

namespace {

SignalFormat resolve(const std::filesystem::path& path, SignalFormat format) {
  if (format != SignalFormat::automatic) return format;
  return path.extension() == ".tsb1" ? SignalFormat::tsb1 : SignalFormat::csv;
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

Tensor stack_samples(const std::vector<Tensor>& samples, const std::string& origin) {
  const Shape first = samples.front().shape();
  Tensor out({samples.size(), first[1], first[2]});
  const std::size_t per = first[1] * first[2];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].shape() != first) {
      throw DataError(origin + ": sample " + std::to_string(i) + " has shape " +
                      shape_to_string(samples[i].shape()) + ", expected " + shape_to_string(first));
    }
    std::copy(samples[i].data().begin(), samples[i].data().end(), out.data().begin() + i * per);
  }
  return out;
}

}  // namespace

Tensor read_signal_csv(std::istream& in, const std::string& origin) {
  std::string line;
  if (!std::getline(in, line)) throw DataError(origin + ":1: malformed header: file is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_commas(line);
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] != "channel_" + std::to_string(i)) {
      throw DataError(origin + ":1: malformed header: column " + std::to_string(i + 1) + " is '" +
                      header[i] + "', expected 'channel_" + std::to_string(i) + "'");
    }
  }
  const std::size_t channels = header.size();
  std::vector<double> values;
  std::size_t lineno = 1, rows = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_commas(line);
    if (cells.size() != channels) {
      throw DataError(origin + ":" + std::to_string(lineno) + ": ragged row: " +
                      std::to_string(cells.size()) + " fields, header has " + std::to_string(channels));
    }
    for (std::size_t i = 0; i < channels; ++i) {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(cells[i], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != cells[i].size()) {
        throw DataError(origin + ":" + std::to_string(lineno) + ": column " + std::to_string(i + 1) +
                        ": not a number: '" + cells[i] + "'");
      }
      values.push_back(v);
    }
    ++rows;
  }
  if (rows == 0) throw DataError(origin + ": no data rows after the header");
  Tensor out({1, channels, rows});
  for (std::size_t t = 0; t < rows; ++t)
    for (std::size_t c = 0; c < channels; ++c) out.at(0, c, t) = values[t * channels + c];
  return out;
}

Tensor load_signals(const std::filesystem::path& path, SignalFormat format) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw DataError("no such file or directory: " + path.string());
  format = resolve(path, format);
  if (format == SignalFormat::tsb1) {
    Tensor t = load_tsb1(path);
    if (t.rank() == 2) return t.reshaped({1, t.dim(0), t.dim(1)});
    if (t.rank() != 3) {
      throw DataError(path.string() + ": expected a [n,C,T] or [C,T] tensor, got " +
                      shape_to_string(t.shape()));
    }
    return t;
  }
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& entry : fs::directory_iterator(path))
      if (entry.path().extension() == ".csv") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError(path.string() + ": directory holds no .csv files");
  } else {
    files.push_back(path);
  }
  std::vector<Tensor> samples;
  for (const auto& f : files) {
    std::ifstream in(f);
    if (!in) throw DataError("cannot open " + f.string());
    samples.push_back(read_signal_csv(in, f.string()));
  }
  return stack_samples(samples, path.string());
}

void write_signal_csv(std::ostream& out, const Tensor& signals, std::size_t sample) {
  const std::size_t c = signals.dim(1), len = signals.dim(2);
  const auto old = out.precision(17);
  for (std::size_t i = 0; i < c; ++i) out << (i ? "," : "") << "channel_" << i;
  out << '\n';
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t i = 0; i < c; ++i) out << (i ? "," : "") << signals.at(sample, i, t);
    out << '\n';
  }
  out.precision(old);
}

void save_signals(const std::filesystem::path& path, const Tensor& signals, SignalFormat format) {
  namespace fs = std::filesystem;
  if (signals.rank() != 3) {
    throw ShapeError("save_signals: expected [n,C,T], got " + shape_to_string(signals.shape()));
  }
  if (resolve(path, format) == SignalFormat::tsb1) {
    save_tsb1(path, signals);
    return;
  }
  fs::create_directories(path);
  for (std::size_t s = 0; s < signals.dim(0); ++s) {
    std::ostringstream name;
    name << "sample_" << std::setw(4) << std::setfill('0') << s << ".csv";
    std::ofstream out(path / name.str());
    if (!out) throw DataError("cannot write " + (path / name.str()).string());
    write_signal_csv(out, signals, s);
  }
}

}  // namespace rfamoe
