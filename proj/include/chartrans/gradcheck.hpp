#pragma once

#include <functional>
#include <vector>

#include "chartrans/tensor.hpp"

namespace chartrans {

// Central-difference gradient verification in double precision.
//
// For each coordinate i of each input, the numeric derivative
// (L(x + eps e_i) - L(x - eps e_i)) / (2 eps) is compared with the gradient
// from backward(). The returned value is the maximum over coordinates of
//   |analytic - numeric| / max(|analytic|, |numeric|, floor)
// where floor = max(1e-8, 1e-3 * largest |analytic| over all inputs).
// Without the floor, coordinates whose true gradient is zero (a key bias
// under softmax, for one) would be judged on roundoff alone.
//
// ReLU and max-pool are not differentiable everywhere, and a kink within eps
// of x spoils the central difference. Coordinates whose central error exceeds
// kOneSidedRecheck are therefore also compared with the second-order one-sided
// differences (-3 L(x) + 4 L(x + eps e_i) - L(x + 2 eps e_i)) / (2 eps) and its
// mirror; the best of the three estimates counts, and `one_sided` records how
// often a one-sided estimate won. A wrong gradient disagrees with all three.
//
// `loss_fn` must rebuild its graph from the current values of `inputs` on each
// call. A non-scalar result is reduced to a scalar by a fixed random
// projection so that every output element contributes.
inline constexpr double kOneSidedRecheck = 1e-8;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t one_sided = 0;
};

GradCheckReport finite_diff_report(const std::function<Tensor<double>()>& loss_fn,
                                   std::vector<Tensor<double>> inputs, double eps = 1e-5);

double finite_diff_check(const std::function<Tensor<double>()>& loss_fn,
                         std::vector<Tensor<double>> inputs, double eps = 1e-5);

// Single-input convenience form: f is applied to x.
double finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                         Tensor<double> x, double eps = 1e-5);

}  // namespace chartrans
