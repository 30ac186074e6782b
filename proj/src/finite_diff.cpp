#include "restune/finite_diff.hpp"

#include <algorithm>
#include <cmath>

#include "restune/errors.hpp"
#include "restune/tape.hpp"

namespace restune {

Tensor finite_diff_grad_inplace(const std::function<double()>& f, Tensor& target, double h) {
  if (!(h > 0.0)) throw ContractError("finite difference step must be positive");
  NoGradScope no_grad;
  auto values = target.mutable_data();
  std::vector<double> grad(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double original = values[i];
    values[i] = original + h;
    const double plus = f();
    values[i] = original - h;
    const double minus = f();
    values[i] = original;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw NumericError("finite difference oracle: non-finite function value at element " + std::to_string(i));
    }
    grad[i] = (plus - minus) / (2.0 * h);
  }
  return Tensor::from(target.shape(), std::move(grad));
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor probe = x.detach();
  return finite_diff_grad_inplace([&] { return f(probe); }, probe, h);
}

double relative_error(const Tensor& actual, const Tensor& reference, double floor) {
  double scale = 0.0;
  for (double v : reference.data()) scale = std::max(scale, std::abs(v));
  return max_abs_diff(actual, reference) / std::max(scale, floor);
}

}  // namespace restune
