#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace care {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;
class GradientMap;
GradientMap backward(const class Tensor& loss);

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  // Empty until the first gradient contribution arrives.
  std::vector<float> grad;
  bool requires_grad = false;
  std::optional<std::size_t> node;
  const Tape* tape = nullptr;
};

// Reference-counted handle to a dense row-major float32 array. Copies of a
// Tensor alias the same storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0F);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor scalar(float value);
  static Tensor from_impl(std::shared_ptr<TensorImpl> impl);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const float> data() const;
  std::span<float> mutable_data();
  float item() const;
  float at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  // Only valid on leaves (tensors not produced by a recorded operation).
  Tensor& set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const float> grad() const;
  void zero_grad();
  void clear_grad();

  std::optional<std::size_t> node() const;

  // New leaf with a copy of the data and no gradient history.
  Tensor detach() const;
  // Deep copy that keeps the requires_grad flag but not the tape node.
  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

bool bitwise_equal(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);

// Append-only record of operations. Node ids are assigned in execution order,
// so inputs always precede the nodes that consume them.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const float> grad_out)>;

  struct Node {
    std::string_view kind;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };

  std::size_t record(std::string_view kind,
                     std::vector<std::shared_ptr<TensorImpl>> inputs,
                     std::shared_ptr<TensorImpl> output, BackwardFn backward);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  void clear();

 private:
  friend class GradientMap;
  friend GradientMap backward(const Tensor& loss);
  std::vector<Node> nodes_;
};

// Makes a tape the recording target for the current thread. Operations issued
// with no active tape are evaluated without gradient bookkeeping.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

class GradientMap {
 public:
  bool contains(const Tensor& leaf) const;
  std::span<const float> at(const Tensor& leaf) const;
  std::size_t size() const { return leaves_.size(); }

 private:
  friend GradientMap backward(const Tensor& loss);
  std::vector<std::shared_ptr<TensorImpl>> leaves_;
};

// Reverse sweep over the active tape from a scalar loss. Gradients accumulate
// into the grad buffers of requires_grad leaves; the consumed nodes are
// released afterwards.
GradientMap backward(const Tensor& loss);

}  // namespace care
