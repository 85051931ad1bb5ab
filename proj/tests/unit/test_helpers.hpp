#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "histodistill/rng.hpp"
#include "histodistill/tensor.hpp"

namespace testutil {

using histodistill::Rng;
using histodistill::ad::Shape;
using histodistill::ad::Tensor;

inline std::vector<double> random_vec(Rng& rng, size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Central finite differences of a scalar-valued function of one flat input.
inline std::vector<double> numeric_grad(const std::function<double(const std::vector<double>&)>& f,
                                        std::vector<double> x, double step = 1e-6) {
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = f(x);
    x[i] = orig - step;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

// Maximum relative error against a reference, with an absolute floor so
// near-zero entries do not blow up the ratio.
inline double max_rel_err(const std::vector<double>& got, const std::vector<double>& want,
                          double abs_floor = 1e-7) {
  double worst = 0.0;
  for (size_t i = 0; i < got.size(); ++i) {
    const double denom = std::max(std::fabs(want[i]), abs_floor);
    worst = std::max(worst, std::fabs(got[i] - want[i]) / denom);
  }
  return worst;
}

// Gradient check of a tensor-expression builder against central differences.
inline double grad_check(const std::function<Tensor(const Tensor&)>& build, const Shape& shape,
                         std::vector<double> x0, double step = 1e-6) {
  Tensor x = Tensor::from_data(shape, x0, /*requires_grad=*/true);
  Tensor y = build(x);
  auto g = histodistill::ad::grad(y, {x});
  auto fd = numeric_grad(
      [&](const std::vector<double>& v) {
        Tensor xx = Tensor::from_data(shape, v, false);
        return build(xx).item();
      },
      x0, step);
  return max_rel_err(g[0].data(), fd);
}

}  // namespace testutil
