#pragma once

#include <functional>
#include <string>
#include <vector>

#include "texlora/grad_check.hpp"

namespace texlora {

struct GradCase {
  std::string name;
  double tolerance;
  std::function<GradCheckResult()> run;
};

/// Finite-difference checks of every differentiable op, layer, loss and the
/// full model on small fixed-seed inputs.
std::vector<GradCase> gradient_suite();

}  // namespace texlora
