#include "rfamoe/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace rfamoe {

namespace {

double evaluate(const ScalarFunction& f, const Tensor& at) {
  ad::Graph g;
  return f(g, g.leaf(at, false)).value().item();
}

}  // namespace

double finite_diff_check(const ScalarFunction& f, const Tensor& point, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: h must be positive");
  ad::Graph graph;
  const ad::Var x = graph.leaf(point);
  const ad::Var loss = f(graph, x);
  const Tensor analytic = ad::backward(graph, loss.id).at(x.id);

  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    probe[i] = point[i] + h;
    const double up = evaluate(f, probe);
    probe[i] = point[i] - h;
    const double down = evaluate(f, probe);
    probe[i] = point[i];
    const double fd = (up - down) / (2.0 * h);
    const double denom = std::max({1.0, std::abs(fd), std::abs(analytic[i])});
    worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
  }
  return worst;
}

}  // namespace rfamoe
