#pragma once

#include <functional>

#include "rmaml/tensor.hpp"

namespace rmaml {

/// Scalar-valued function of one tensor. It always receives a tracked leaf, so
/// it may itself call grad() on its argument.
using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Analytic gradient of `f` at `point`.
Tensor analytic_gradient(const ScalarFn& f, const Tensor& point);

/// Central-difference estimate of the gradient of `f` at `point`.
Tensor numeric_gradient(const ScalarFn& f, const Tensor& point, double eps);

/// max_i |analytic_i - numeric_i| / max(1, |analytic_i|); non-finite values yield +inf.
double finite_diff_check(const ScalarFn& f, const Tensor& point, double eps = 1e-5);

}  // namespace rmaml
