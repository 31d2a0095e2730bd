#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "care/tensor.hpp"

namespace care::check {

// Compares reverse-mode gradients against central finite differences. The
// output is projected onto fixed random weights so the scalar under test is
// sum(out * w), accumulated in double outside the engine.
struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-3;
  std::uint64_t seed = 1;
};

struct GradCheckResult {
  std::string name;
  // Norm-wise relative error ||analytic - numeric|| / max(||analytic||, ||numeric||) over the
  // concatenated gradient of all checked inputs.
  double rel_error = 0.0;
  bool passed = false;
};

using Forward = std::function<Tensor(std::span<const Tensor>)>;

// Inputs with requires_grad == true are checked; others are held constant.
GradCheckResult gradient_check(std::string name, const Forward& forward,
                               std::vector<Tensor> inputs, const GradCheckOptions& opt = {});

// Finite-difference checks of every differentiable tensor-core op at
// `configs` random shapes and seeds each.
std::vector<GradCheckResult> tensor_op_suite(int configs, std::uint64_t seed);

}  // namespace care::check
