#include "rfamoe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <span>

namespace rfamoe {

namespace {

double ssd_of(std::span<const double> x, std::span<const double> y) {
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return s;
}

double prd_of(std::span<const double> x, std::span<const double> y, bool centered) {
  double mean = 0;
  if (centered) {
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
  }
  double energy = 0;
  for (double v : x) energy += (v - mean) * (v - mean);
  if (energy == 0.0) {
    throw ZeroReferenceError(centered ? "PRD undefined: reference signal is constant"
                                      : "PRD undefined: reference signal is all zeros");
  }
  return 100.0 * std::sqrt(ssd_of(x, y) / energy);
}

double mad_of(std::span<const double> x, std::span<const double> y) {
  double m = 0;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
  return m;
}

}  // namespace

double ssd(const Tensor& x, const Tensor& x_hat) {
  require_same_shape(x, x_hat, "ssd");
  return ssd_of(x.data(), x_hat.data());
}

double prd(const Tensor& x, const Tensor& x_hat, bool centered) {
  require_same_shape(x, x_hat, "prd");
  return prd_of(x.data(), x_hat.data(), centered);
}

double mad(const Tensor& x, const Tensor& x_hat) {
  require_same_shape(x, x_hat, "mad");
  return mad_of(x.data(), x_hat.data());
}

MetricsReport evaluate(const Tensor& truth, const Tensor& pred, const Tensor* region,
                       bool centered_prd) {
  require_same_shape(truth, pred, "evaluate");
  if (region) require_same_shape(truth, *region, "evaluate region");
  if (truth.rank() < 2) {
    throw ShapeError("evaluate: expected [B, ...], got " + shape_to_string(truth.shape()));
  }
  const std::size_t rows = truth.dim(0), per_row = truth.numel() / rows;
  MetricsReport report;
  std::vector<double> x, y;
  for (std::size_t b = 0; b < rows; ++b) {
    x.clear();
    y.clear();
    for (std::size_t i = b * per_row; i < (b + 1) * per_row; ++i) {
      if (region && (*region)[i] != 0.0) continue;
      x.push_back(truth[i]);
      y.push_back(pred[i]);
    }
    if (x.empty()) {
      throw std::invalid_argument("evaluate: sample " + std::to_string(b) +
                                  " has an empty scoring region (no missing entries)");
    }
    report.per_sample.push_back({prd_of(x, y, centered_prd), ssd_of(x, y), mad_of(x, y)});
  }
  for (const auto& s : report.per_sample) {
    report.aggregate.prd += s.prd;
    report.aggregate.ssd += s.ssd;
    report.aggregate.mad += s.mad;
  }
  const double n = static_cast<double>(rows);
  report.aggregate = {report.aggregate.prd / n, report.aggregate.ssd / n, report.aggregate.mad / n};
  return report;
}

void write_metrics_csv(std::ostream& out, const MetricsReport& report) {
  const auto old = out.precision(12);
  out << "index,prd,ssd,mad\n";
  for (std::size_t i = 0; i < report.per_sample.size(); ++i) {
    const auto& s = report.per_sample[i];
    out << i << ',' << s.prd << ',' << s.ssd << ',' << s.mad << '\n';
  }
  out << "mean," << report.aggregate.prd << ',' << report.aggregate.ssd << ','
      << report.aggregate.mad << '\n';
  out.precision(old);
}

void save_metrics_csv(const std::filesystem::path& path, const MetricsReport& report) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write_metrics_csv(out, report);
}

}  // namespace rfamoe
