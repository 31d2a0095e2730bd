#include "care/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "care/errors.hpp"

namespace care {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_str(shape));
  }
}

thread_local Tape* g_active_tape = nullptr;

}  // namespace

Tensor::Tensor(Shape shape, float fill) : impl_(std::make_shared<TensorImpl>()) {
  validate_shape(shape);
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : impl_(std::make_shared<TensorImpl>()) {
  validate_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

Tensor Tensor::scalar(float value) { return Tensor(Shape{1}, std::vector<float>{value}); }

Tensor Tensor::from_impl(std::shared_ptr<TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const float> Tensor::data() const { return impl_->data; }

std::span<float> Tensor::mutable_data() { return impl_->data; }

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

float Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("index rank does not match " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= impl_->shape[axis]) throw DimensionError("index out of range for " + shape_str(shape()));
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  if (impl_->node) throw ContractError("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = value;
  if (!value) impl_->grad.clear();
  return *this;
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const float> Tensor::grad() const { return impl_->grad; }

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0F);
}

void Tensor::clear_grad() { impl_->grad.clear(); }

std::optional<std::size_t> Tensor::node() const { return impl_->node; }

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

Tensor Tensor::clone() const {
  Tensor t(impl_->shape, impl_->data);
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](float v) { return std::isfinite(v); });
}

std::size_t Tape::record(std::string_view kind, std::vector<std::shared_ptr<TensorImpl>> inputs,
                         std::shared_ptr<TensorImpl> output, BackwardFn backward) {
  const std::size_t id = nodes_.size();
  output->node = id;
  output->tape = this;
  output->requires_grad = true;
  nodes_.push_back(Node{kind, std::move(inputs), std::move(output), std::move(backward)});
  return id;
}

void Tape::clear() {
  for (Node& n : nodes_) {
    // Outputs that outlive the tape become plain constants.
    n.output->node.reset();
    n.output->tape = nullptr;
    n.output->requires_grad = false;
    n.output->grad.clear();
  }
  nodes_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

bool GradientMap::contains(const Tensor& leaf) const {
  return std::any_of(leaves_.begin(), leaves_.end(),
                     [&](const auto& p) { return p == leaf.impl(); });
}

std::span<const float> GradientMap::at(const Tensor& leaf) const {
  if (!contains(leaf)) throw ContractError("tensor has no gradient in this map");
  return leaf.grad();
}

GradientMap backward(const Tensor& loss) {
  Tape* tape = active_tape();
  if (loss.numel() != 1) throw ContractError("backward needs a scalar loss, got " + shape_str(loss.shape()));
  if (tape == nullptr || !loss.node() || loss.impl()->tape != tape) {
    throw ContractError("loss was not produced on the active tape");
  }
  const std::size_t root = *loss.node();
  loss.impl()->grad.assign(1, 1.0F);

  GradientMap map;
  std::unordered_set<const TensorImpl*> seen;
  for (std::size_t id = root + 1; id-- > 0;) {
    Tape::Node& n = tape->nodes_[id];
    if (n.output->grad.empty()) continue;
    n.backward(n.output->grad);
    for (const auto& in : n.inputs) {
      if (!in->node && in->requires_grad && seen.insert(in.get()).second) map.leaves_.push_back(in);
    }
  }
  tape->clear();
  return map;
}

}  // namespace care
