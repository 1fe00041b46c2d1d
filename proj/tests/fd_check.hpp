#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "rvit/autodiff.hpp"
#include "rvit/tensor.hpp"

namespace rvit_test {

// Compares analytic gradients against central finite differences in double
// precision. `build` maps leaves over `inputs` (same order) to a scalar loss
// Var; it is re-invoked for every perturbed evaluation, so any randomness
// inside it must be keyed, not stateful.
template <typename BuildFn>
double fd_max_rel_err(std::vector<rvit::Tensor<double>>& inputs, BuildFn build,
                      double h = 1e-5) {
  using rvit::ag::backward;
  using rvit::ag::leaf;
  using rvit::ag::NoGradGuard;
  using rvit::ag::Var;

  std::vector<Var<double>> leaves;
  leaves.reserve(inputs.size());
  for (auto& t : inputs) leaves.push_back(leaf(t));
  auto loss = build(leaves);
  backward(loss);

  auto eval = [&]() {
    NoGradGuard ng;
    std::vector<Var<double>> fresh;
    fresh.reserve(inputs.size());
    for (auto& t : inputs) fresh.push_back(leaf(t));
    return build(fresh)->value.at(0);
  };

  double max_rel = 0.0;
  for (size_t k = 0; k < inputs.size(); ++k) {
    rvit::Tensor<double>& t = inputs[k];
    for (size_t i = 0; i < t.numel(); ++i) {
      const double orig = t.data()[i];
      t.data()[i] = orig + h;
      const double lp = eval();
      t.data()[i] = orig - h;
      const double lm = eval();
      t.data()[i] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = leaves[k]->grad.defined() ? leaves[k]->grad.data()[i] : 0.0;
      // The absolute floor sits above the FD noise floor (machine epsilon
      // over h), so exact-zero gradients compare as equal instead of as
      // noise over noise.
      const double denom = std::max({1e-6, std::fabs(fd), std::fabs(an)});
      max_rel = std::max(max_rel, std::fabs(fd - an) / denom);
    }
  }
  return max_rel;
}

}  // namespace rvit_test
