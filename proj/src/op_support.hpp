#pragma once

// Internal helpers shared by the operation implementations.

#include <initializer_list>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "care/errors.hpp"
#include "care/tensor.hpp"

namespace care::detail {

inline std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<float> data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

// True when the op must be recorded: a tape is active and some input needs a
// gradient.
inline bool wants_grad(std::span<const Tensor* const> inputs) {
  if (active_tape() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

inline std::vector<float>& grad_of(TensorImpl& impl) {
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0F);
  return impl.grad;
}

void check_finite(std::string_view kind, const TensorImpl& out);

// Wraps raw output into a Tensor, recording a tape node when required. The
// backward functor is called as fn(grad_out, output_impl).
template <typename Fn>
Tensor finish(std::string_view kind, Shape shape, std::vector<float> data,
              std::span<const Tensor* const> inputs, Fn&& backward) {
  auto out = new_impl(std::move(shape), std::move(data));
#ifndef NDEBUG
  check_finite(kind, *out);
#endif
  if (wants_grad(inputs)) {
    std::vector<std::shared_ptr<TensorImpl>> ins;
    ins.reserve(inputs.size());
    for (const Tensor* t : inputs) ins.push_back(t->impl());
    const TensorImpl* raw = out.get();
    active_tape()->record(kind, std::move(ins), out,
                          [fn = std::forward<Fn>(backward), raw](std::span<const float> g) {
                            fn(g, *raw);
                          });
  }
  return Tensor::from_impl(std::move(out));
}

template <typename Fn>
Tensor finish(std::string_view kind, Shape shape, std::vector<float> data,
              std::initializer_list<const Tensor*> inputs, Fn&& backward) {
  return finish(kind, std::move(shape), std::move(data),
                std::span<const Tensor* const>(inputs.begin(), inputs.size()),
                std::forward<Fn>(backward));
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha,
          const float* a, const float* b, float beta, float* c);

}  // namespace care::detail
