#include "chartrans/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "chartrans/ops.hpp"

namespace chartrans {

namespace {

// Reduces y to a scalar with weights drawn from a generator seeded by the
// output size, so every evaluation of the same function uses the same weights.
Tensor<double> project(const Tensor<double>& y) {
  if (y.numel() == 1) return reshape(y, {});
  std::mt19937_64 rng(0x9e3779b97f4a7c15ULL ^ y.numel());
  std::vector<double> w(y.numel());
  for (auto& v : w) v = double(rng() >> 11) * 0x1.0p-53 * 2.0 - 1.0;
  auto weights = Tensor<double>::from(y.shape(), std::move(w));
  return sum(mul(y, weights));
}

}  // namespace

GradCheckReport finite_diff_report(const std::function<Tensor<double>()>& loss_fn,
                                   std::vector<Tensor<double>> inputs, double eps) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  backward(project(loss_fn()));

  std::vector<std::vector<double>> analytic;
  for (const auto& in : inputs) {
    if (in.has_grad()) {
      analytic.emplace_back(in.grad().begin(), in.grad().end());
    } else {
      analytic.emplace_back(in.numel(), 0.0);
    }
  }

  NoGradGuard no_grad;
  const double base = project(loss_fn()).item();
  double scale = 0.0;
  for (const auto& g : analytic) {
    for (double a : g) scale = std::max(scale, std::abs(a));
  }
  const double floor = std::max(1e-8, 1e-3 * scale);
  auto rel = [&](double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
  };
  GradCheckReport report;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double plus = project(loss_fn()).item();
      values[i] = saved - eps;
      const double minus = project(loss_fn()).item();
      values[i] = saved;
      const double a = analytic[k][i];
      double err = rel(a, (plus - minus) / (2.0 * eps));
      if (err > kOneSidedRecheck) {
        // Second-order one-sided stencils: one of them avoids a kink in
        // (x - eps, x) or (x, x + eps).
        values[i] = saved + 2.0 * eps;
        const double plus2 = project(loss_fn()).item();
        values[i] = saved - 2.0 * eps;
        const double minus2 = project(loss_fn()).item();
        values[i] = saved;
        const double right = (-3.0 * base + 4.0 * plus - plus2) / (2.0 * eps);
        const double left = (3.0 * base - 4.0 * minus + minus2) / (2.0 * eps);
        const double one_sided = std::min(rel(a, right), rel(a, left));
        if (one_sided < err) {
          err = one_sided;
          ++report.one_sided;
        }
      }
      report.max_rel_error = std::max(report.max_rel_error, err);
      ++report.coordinates;
    }
  }
  return report;
}

double finite_diff_check(const std::function<Tensor<double>()>& loss_fn,
                         std::vector<Tensor<double>> inputs, double eps) {
  return finite_diff_report(loss_fn, std::move(inputs), eps).max_rel_error;
}

double finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                         Tensor<double> x, double eps) {
  return finite_diff_check([&] { return f(x); }, {x}, eps);
}

}  // namespace chartrans
