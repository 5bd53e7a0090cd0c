#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "fost/tensor.hpp"

namespace fost {

/// Central-difference gradient (f(x + h e_i) - f(x - h e_i)) / 2h of a scalar
/// function at `x`. Throws NonFiniteEvaluation if any probe is NaN/Inf.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double h);

/// Same estimate, perturbing a leaf (typically a network parameter) in place.
/// The leaf is restored exactly before returning.
std::vector<double> finite_difference_gradient(const std::function<double()>& f, Tensor& leaf,
                                               double h);

struct GradientComparison {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;  // over the coordinates compared absolutely
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
  bool passed = true;
};

/// Per-coordinate check: relative error |a - b| / max(|a|, |b|) <= rel_tol,
/// except where both magnitudes are below `abs_floor`, which are compared
/// absolutely against `abs_floor`.
GradientComparison compare_gradients(std::span<const double> analytic, std::span<const double> numeric,
                                     double rel_tol, double abs_floor);

}  // namespace fost
