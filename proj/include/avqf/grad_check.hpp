#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "avqf/tensor.hpp"

namespace avqf {

// Compares the analytic gradient of a scalar-valued function against central
// differences, returning max over elements of
//   |analytic - (f(x+h e) - f(x-h e)) / 2h| / max(1, |analytic|).
// f is re-evaluated from scratch for every probe; the checked tensors are
// perturbed in place and restored. Run with Real = double: float rounding
// swamps the difference quotient.
template <typename Real, typename F>
Real grad_check(F&& f, const std::vector<Tensor<Real>>& xs, Real h) {
  if (!(h > Real(0))) throw ValueError("grad_check: step h must be positive");
  for (const auto& x : xs) {
    if (!x.requires_grad()) {
      throw ValueError("grad_check: all checked tensors must require gradients");
    }
  }

  for (auto x : xs) x.zero_grad();
  Tensor<Real> loss = f();
  if (loss.numel() != 1) {
    throw ShapeError("grad_check: f must be scalar-valued, got shape " +
                     shape_str(loss.shape()));
  }
  backward(loss);

  std::vector<std::vector<Real>> analytic;
  analytic.reserve(xs.size());
  for (const auto& x : xs) {
    analytic.push_back(x.has_grad() ? x.grad() : std::vector<Real>(x.numel(), Real(0)));
  }

  Real max_rel = 0;
  for (size_t xi = 0; xi < xs.size(); ++xi) {
    Tensor<Real> x = xs[xi];
    for (size_t i = 0; i < x.numel(); ++i) {
      const Real orig = x.data()[i];
      x.data()[i] = orig + h;
      const Real lp = f().item();
      x.data()[i] = orig - h;
      const Real lm = f().item();
      x.data()[i] = orig;
      const Real fd = (lp - lm) / (2 * h);
      const Real a = analytic[xi][i];
      const Real rel = std::abs(a - fd) / std::max(Real(1), std::abs(a));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

template <typename Real, typename F>
Real grad_check(F&& f, const Tensor<Real>& x, Real h) {
  return grad_check(std::forward<F>(f), std::vector<Tensor<Real>>{x}, h);
}

}  // namespace avqf
