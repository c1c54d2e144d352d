#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "ddmc/autodiff.hpp"

namespace ddmc {

/// Compares reverse-mode gradients of a scalar-valued function against
/// central differences, element by element, for every input in `point`.
/// Relative error per element is |a - n| / max(|a|, |n|, floor).
inline double grad_check(const std::function<Var<double>(const std::vector<Var<double>>&)>& f,
                         const std::vector<Tensor<double>>& point, double eps = 1e-5,
                         double floor = 1e-4) {
  std::vector<Var<double>> leaves;
  for (const auto& t : point) leaves.push_back(Var<double>::leaf(t));
  Var<double> out = f(leaves);
  if (out.value().size() != 1)
    throw ShapeError("grad_check: function output is not scalar " + shape_str(out.shape()));
  backward(out);

  auto eval = [&](std::size_t which, std::size_t idx, double delta) {
    NoGradGuard guard;
    std::vector<Var<double>> in;
    for (std::size_t k = 0; k < point.size(); ++k) {
      Tensor<double> t = point[k];
      if (k == which) t[idx] += delta;
      in.push_back(Var<double>::constant(std::move(t)));
    }
    return f(in).item();
  };

  double worst = 0;
  for (std::size_t k = 0; k < point.size(); ++k) {
    const auto& g = leaves[k].grad();
    for (std::size_t i = 0; i < point[k].size(); ++i) {
      const double num = (eval(k, i, eps) - eval(k, i, -eps)) / (2 * eps);
      const double ana = g[i];
      const double denom = std::max({std::abs(ana), std::abs(num), floor});
      worst = std::max(worst, std::abs(ana - num) / denom);
    }
  }
  return worst;
}

}  // namespace ddmc
