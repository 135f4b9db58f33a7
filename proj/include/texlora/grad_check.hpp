#pragma once

#include <functional>
#include <span>

#include "texlora/tensor.hpp"

namespace texlora {

/// Builds a scalar expression from its inputs. Called once with tracked
/// leaves and many times with plain perturbed values.
using ScalarFn = std::function<Tensor(std::span<const Tensor>)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t evaluations = 0;
};

/// Compares reverse-mode gradients with central differences. The error of
/// one element is |analytic - numeric| / max(1e-8, |numeric|).
GradCheckResult grad_check(const ScalarFn& f, std::span<const Tensor> inputs, double eps = 1e-5);

}  // namespace texlora
