#include "fost/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fost/errors.hpp"

namespace fost {

namespace {

double checked(double v, std::size_t coord) {
  if (!std::isfinite(v)) {
    throw NonFiniteEvaluation("finite-difference probe at coordinate " + std::to_string(coord) +
                              " returned a non-finite value");
  }
  return v;
}

}  // namespace

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double h) {
  if (!(h > 0.0)) throw Error("finite difference step must be positive");
  std::vector<double> probe(x.data().begin(), x.data().end());
  std::vector<double> grad(probe.size());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = checked(f(Tensor::from(x.shape(), probe)), i);
    probe[i] = orig - h;
    const double down = checked(f(Tensor::from(x.shape(), probe)), i);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return Tensor::from(x.shape(), std::move(grad));
}

std::vector<double> finite_difference_gradient(const std::function<double()>& f, Tensor& leaf, double h) {
  if (!(h > 0.0)) throw Error("finite difference step must be positive");
  auto values = leaf.mutable_data();
  std::vector<double> grad(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + h;
    const double up = checked(f(), i);
    values[i] = orig - h;
    const double down = checked(f(), i);
    values[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

GradientComparison compare_gradients(std::span<const double> analytic, std::span<const double> numeric,
                                     double rel_tol, double abs_floor) {
  if (analytic.size() != numeric.size()) throw ShapeMismatch("gradient vectors differ in length");
  GradientComparison cmp;
  cmp.coordinates = analytic.size();
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], b = numeric[i];
    const double scale = std::max(std::abs(a), std::abs(b));
    const double diff = std::abs(a - b);
    if (scale < abs_floor) {
      cmp.max_absolute_error = std::max(cmp.max_absolute_error, diff);
      if (diff > abs_floor) cmp.passed = false;
      continue;
    }
    const double rel = diff / scale;
    if (rel > cmp.max_relative_error) {
      cmp.max_relative_error = rel;
      cmp.worst_index = i;
    }
    if (rel > rel_tol) cmp.passed = false;
  }
  return cmp;
}

}  // namespace fost
