#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "care/tensor.hpp"

// Differentiable operations. Each op checks its shape contract, computes the
// forward result and, when a tape is active and an input requires a gradient,
// records the matching backward rule.

namespace care {

// [m,k]x[k,n] -> [m,n], or batched [g,m,k]x[g,k,n] -> [g,m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor add_scalar(const Tensor& a, float value);
// bias has shape [n] and is broadcast over the last axis of x.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor relu(const Tensor& x);

// Reductions to a scalar of shape [1].
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// [..., n] -> [...]
Tensor sum_last(const Tensor& x);
// Euclidean norm over the last axis; the subgradient at zero is zero.
Tensor row_norm(const Tensor& x);

inline constexpr float kNormEpsilon = 1e-12F;
// Normalizes every vector along the last axis. Throws DegenerateError when a
// norm falls below eps.
Tensor l2_normalize(const Tensor& x, float eps = kNormEpsilon);
// Softmax along the last axis, max-subtracted per row.
Tensor softmax_rows(const Tensor& x);
// Mean softmax cross-entropy of logits [b,k] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
// table [r,d], rows -> [rows.size(), d]
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows);
// out.flat[i] = x.flat[index[i]]; backward scatter-adds.
Tensor gather(const Tensor& x, std::span<const std::size_t> index, Shape out_shape);

// [b,c,h,w] -> [b,c], average over spatial positions.
Tensor mean_pool_2d(const Tensor& x);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
};
// x [b,c,h,w], weight [o,c,kh,kw] -> [b,o,h',w'] cross-correlation.
Tensor conv2d(const Tensor& x, const Tensor& weight, Conv2dOptions opt = {});

enum class BnMode { train, eval };

struct BatchNormOptions {
  BnMode mode = BnMode::train;
  // Whether train mode folds the batch statistics into the running buffers.
  bool update_running = true;
  float momentum = 0.9F;
  float eps = 1e-5F;
};
// Normalizes per channel (axis 1) of a [b,c] or [b,c,h,w] tensor. running_mean
// and running_var have shape [c].
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                 Tensor& running_var, const BatchNormOptions& opt = {});

inline Tensor stop_gradient(const Tensor& x) { return x.detach(); }

}  // namespace care
