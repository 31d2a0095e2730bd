#pragma once

#include <span>

#include "care/tensor.hpp"

namespace care {

// Heavy-ball SGD: v <- momentum * v + (grad + weight_decay * param);
// param <- param - lr * v. An empty grad span counts as zero gradient.
void sgd_momentum_step(Tensor& param, std::span<const float> grad, Tensor& velocity, float lr,
                       float momentum = 0.9F, float weight_decay = 0.0F);

}  // namespace care
