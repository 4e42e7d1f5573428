#pragma once

// Central finite-difference gradient oracle for the autograd tests and the
// acceptance suite. Independent of the backward implementations it checks.

#include <cmath>
#include <functional>
#include <vector>

#include "lsd/tensor.hpp"

namespace lsd::test {

// Numerical gradient of f at x via central differences.
inline Tensor fd_gradient(const std::function<double(const Tensor&)>& f, Tensor x,
                          double h = 1e-6) {
  Tensor g(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Relative error between gradients, max |a-b| / max(1e-8, max |a|, max |b|).
inline double grad_rel_err(const Tensor& a, const Tensor& b) {
  double num = 0.0, den = 1e-8;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::fabs(a[i] - b[i]));
    den = std::max(den, std::max(std::fabs(a[i]), std::fabs(b[i])));
  }
  return num / den;
}

}  // namespace lsd::test
