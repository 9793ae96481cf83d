#pragma once

// Central-finite-difference verification of analytic gradients.

#include <cmath>
#include <functional>
#include <stdexcept>

#include "miclab/tensor.hpp"

namespace miclab::nk {

// f must rebuild its graph from x on every call (x is perturbed in place).
// Returns max over entries of |analytic - central| / (|analytic| + |central| + 1e-8).
inline double grad_check(const std::function<TensorPtr(const TensorPtr&)>& f,
                         const TensorPtr& x, double step = 1e-5) {
  if (step <= 0.0) throw std::invalid_argument("grad_check: step must be > 0");
  x->requires_grad = true;
  x->ensure_grad();
  x->zero_grad();
  auto y = f(x);
  if (!y->is_scalar())
    throw std::invalid_argument("grad_check: f must return a scalar");
  if (!std::isfinite(y->scalar()))
    throw std::invalid_argument("grad_check: f(x) is not finite");
  backward(y);
  std::vector<double> analytic = x->grad;

  double worst = 0.0;
  for (std::size_t i = 0; i < x->size(); ++i) {
    double saved = x->data[i];
    x->data[i] = saved + step;
    double up = f(x)->scalar();
    x->data[i] = saved - step;
    double down = f(x)->scalar();
    x->data[i] = saved;
    double central = (up - down) / (2.0 * step);
    double rel = std::fabs(analytic[i] - central) /
                 (std::fabs(analytic[i]) + std::fabs(central) + 1e-8);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace miclab::nk
