#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <vector>

#include "rfamoe/tensor.hpp"

namespace rfamoe {

/// PRD is undefined when the reference has no energy.
class ZeroReferenceError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Sum of squared differences.
double ssd(const Tensor& x, const Tensor& x_hat);
/// Percent root-mean-square difference, 100 * sqrt(sum (x - x_hat)^2 / sum x^2).
/// With `centered`, the denominator is sum (x - mean x)^2.
double prd(const Tensor& x, const Tensor& x_hat, bool centered = false);
/// Maximum absolute difference.
double mad(const Tensor& x, const Tensor& x_hat);

struct SampleMetrics {
  double prd = 0;
  double ssd = 0;
  double mad = 0;
};

struct MetricsReport {
  std::vector<SampleMetrics> per_sample;
  SampleMetrics aggregate;
};

/// Metrics per batch row over all channels jointly. With `region`, only entries
/// where region == 0 (the missing set) count.
MetricsReport evaluate(const Tensor& truth, const Tensor& pred, const Tensor* region = nullptr,
                       bool centered_prd = false);

void write_metrics_csv(std::ostream& out, const MetricsReport& report);
void save_metrics_csv(const std::filesystem::path& path, const MetricsReport& report);

}  // namespace rfamoe
