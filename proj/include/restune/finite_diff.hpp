#pragma once

#include <functional>

#include "restune/tensor.hpp"

namespace restune {

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element of
// x. Evaluates f on a private copy of x with recording disabled; the autodiff
// state of x is never read.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5);

// Same estimator, but perturbs `target` in place and restores every element
// bit-exactly afterwards. For checking gradients of parameters that `f`
// reaches through a model.
Tensor finite_diff_grad_inplace(const std::function<double()>& f, Tensor& target, double h = 1e-5);

// max_i |a_i - b_i| / max(max_i |b_i|, floor): infinity-norm relative error of
// `actual` against the `reference`. The floor keeps all-zero references from
// dividing by zero.
double relative_error(const Tensor& actual, const Tensor& reference, double floor = 1e-12);

}  // namespace restune
