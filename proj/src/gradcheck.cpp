#include "rmaml/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "rmaml/graph.hpp"

namespace rmaml {

namespace {
double evaluate(const ScalarFn& f, const Tensor& point) {
  auto graph = Graph::create();
  return f(graph->track(point)).item();
}
}  // namespace

Tensor analytic_gradient(const ScalarFn& f, const Tensor& point) {
  auto graph = Graph::create();
  const Tensor x = graph->track(point);
  const Tensor out = f(x);
  return grad(out, x).detach();
}

Tensor numeric_gradient(const ScalarFn& f, const Tensor& point, double eps) {
  const auto base = point.data();
  std::vector<double> values(base.begin(), base.end());
  std::vector<double> result(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double keep = values[i];
    values[i] = keep + eps;
    const double up = evaluate(f, Tensor(point.shape(), values));
    values[i] = keep - eps;
    const double down = evaluate(f, Tensor(point.shape(), values));
    values[i] = keep;
    result[i] = (up - down) / (2.0 * eps);
  }
  return Tensor(point.shape(), std::move(result));
}

double finite_diff_check(const ScalarFn& f, const Tensor& point, double eps) {
  const Tensor analytic = analytic_gradient(f, point);
  const Tensor numeric = numeric_gradient(f, point, eps);
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.numel(); ++i) {
    const double a = analytic[i];
    const double n = numeric[i];
    if (!std::isfinite(a) || !std::isfinite(n)) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, std::abs(a - n) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

}  // namespace rmaml
