#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "voxdiff/tensor.hpp"

namespace voxdiff {

// Scalar function of a set of leaf tensors.
using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares analytic gradients against central finite differences for every
// element of every input, returning the worst relative error with
// denominator max(|analytic|, |numeric|, 1e-8). Throws on non-finite values.
inline double grad_check(const TensorFn& f, std::vector<Tensor> inputs, double step = 1e-4) {
  for (auto& t : inputs) t.zero_grad();
  Tensor loss = f(inputs);
  require(loss.numel() == 1, "grad_check: function must be scalar-valued");
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw UsageError("grad_check: non-finite function value");
  backward(loss);

  std::vector<std::vector<real>> analytic;
  for (auto& t : inputs) analytic.push_back(t.grad());

  double worst = 0.0;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    if (!inputs[ti].requires_grad()) continue;
    auto& vals = inputs[ti].value();
    for (int64_t i = 0; i < inputs[ti].numel(); ++i) {
      const real saved = vals[i];
      vals[i] = saved + static_cast<real>(step);
      const double fp = static_cast<double>(f(inputs).item());
      vals[i] = saved - static_cast<real>(step);
      const double fm = static_cast<double>(f(inputs).item());
      vals[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw UsageError("grad_check: non-finite perturbed value");
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = static_cast<double>(analytic[ti][i]);
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
  }
  return worst;
}

inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                         double step = 1e-4) {
  return grad_check([&f](const std::vector<Tensor>& in) { return f(in[0]); }, {point}, step);
}

}  // namespace voxdiff
