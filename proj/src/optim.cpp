#include "care/optim.hpp"

#include "care/errors.hpp"

namespace care {

void sgd_momentum_step(Tensor& param, std::span<const float> grad, Tensor& velocity, float lr,
                       float momentum, float weight_decay) {
  if (param.shape() != velocity.shape() || (!grad.empty() && grad.size() != param.numel())) {
    throw DimensionError("sgd_momentum_step: param " + shape_str(param.shape()) + ", velocity " +
                         shape_str(velocity.shape()) + " and " + std::to_string(grad.size()) +
                         " gradient values disagree");
  }
  auto p = param.mutable_data();
  auto v = velocity.mutable_data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const float g = (grad.empty() ? 0.0F : grad[i]) + weight_decay * p[i];
    v[i] = momentum * v[i] + g;
    p[i] -= lr * v[i];
  }
}

}  // namespace care
