#pragma once

#include <functional>

#include "rfamoe/autograd.hpp"

namespace rfamoe {

/// Builds a scalar loss from a leaf holding the evaluation point.
using ScalarFunction = std::function<ad::Var(ad::Graph&, ad::Var)>;

/// Central-difference check of the tape gradient of `f` at `point`.
/// Returns max_i |g_fd - g_ad| / max(1, |g_fd|, |g_ad|).
double finite_diff_check(const ScalarFunction& f, const Tensor& point, double h = 1e-4);

}  // namespace rfamoe
