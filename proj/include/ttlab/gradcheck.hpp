#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "ttlab/tensor.hpp"

namespace ttlab {

// Compares analytic gradients against central finite differences.
//
// fn must map `point` to a scalar loss, reading point's current values each
// call (the check perturbs them in place).  Returns the max of
// |analytic - numeric| / max(1, |analytic|) over all entries of point.
// Use double tensors: float quantisation drowns the signal.
template <typename S>
double finite_diff_check(const std::function<TensorT<S>(TensorT<S>&)>& fn, TensorT<S> point,
                         S eps) {
  if (!(eps > S(0))) throw std::invalid_argument("finite_diff_check: eps must be positive");
  point.set_requires_grad(true);
  point.ensure_grad();
  point.zero_grad();
  {
    Tape<S> tape;
    TensorT<S> loss = fn(point);
    tape.backward(loss);
  }
  std::vector<S> analytic(point.grad(), point.grad() + point.numel());

  double worst = 0;
  S* p = point.data();
  for (int64_t i = 0; i < point.numel(); ++i) {
    S saved = p[i];
    p[i] = saved + eps;
    double up = static_cast<double>(fn(point).item());
    p[i] = saved - eps;
    double down = static_cast<double>(fn(point).item());
    p[i] = saved;
    double numeric = (up - down) / (2.0 * static_cast<double>(eps));
    double a = static_cast<double>(analytic[i]);
    worst = std::max(worst, std::fabs(a - numeric) / std::max(1.0, std::fabs(a)));
  }
  return worst;
}

}  // namespace ttlab
