#include "morphtrack/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace morphtrack {

std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

namespace {

std::shared_ptr<detail::TensorImpl> new_impl(Shape shape,
                                             std::vector<double> values,
                                             bool requires_grad) {
  for (int d : shape) {
    if (d <= 0)
      throw std::invalid_argument("tensor: non-positive dimension in shape " +
                                  shape_to_string(shape));
  }
  if (shape_numel(shape) != values.size())
    throw std::invalid_argument("tensor: shape " + shape_to_string(shape) +
                                " does not match data length " +
                                std::to_string(values.size()));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::make_shared<std::vector<double>>(std::move(values));
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(new_impl(shape, std::vector<double>(shape_numel(shape), 0.0),
                         requires_grad));
}

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
  return Tensor(
      new_impl(shape, std::vector<double>(shape_numel(shape), v), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(new_impl(Shape{}, {v}, requires_grad));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data,
                         bool requires_grad) {
  return Tensor(new_impl(shape, std::move(data), requires_grad));
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev,
                     bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor(new_impl(shape, std::move(v), requires_grad));
}

const Shape& Tensor::shape() const {
  if (!impl_) throw std::runtime_error("tensor: undefined handle");
  return impl_->shape;
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

int Tensor::dim(int axis) const {
  const Shape& s = shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw std::out_of_range("tensor: axis " + std::to_string(axis) +
                            " out of range for shape " + shape_to_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

double Tensor::value() const {
  if (numel() != 1)
    throw std::runtime_error("tensor: value() on non-scalar of shape " +
                             shape_to_string(shape()));
  return (*impl_->values)[0];
}

std::span<const double> Tensor::data() const {
  if (!impl_) throw std::runtime_error("tensor: undefined handle");
  return {impl_->values->data(), impl_->values->size()};
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) throw std::runtime_error("tensor: undefined handle");
  return {impl_->values->data(), impl_->values->size()};
}

bool Tensor::requires_grad() const {
  return impl_ ? impl_->requires_grad : false;
}

void Tensor::set_requires_grad(bool rg) {
  if (!impl_) throw std::runtime_error("tensor: undefined handle");
  if (impl_->edge)
    throw std::runtime_error(
        "tensor: requires_grad may only be toggled on leaf tensors");
  impl_->requires_grad = rg;
  if (!rg) impl_->grad.clear();
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad())
    throw std::runtime_error("tensor: gradient not populated");
  return {impl_->grad.data(), impl_->grad.size()};
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const {
  if (!impl_) throw std::runtime_error("tensor: undefined handle");
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->values = impl_->values;  // shared payload
  impl->requires_grad = false;
  return Tensor(std::move(impl));
}

Tensor make_op_output(Shape shape, std::vector<double> values,
                      std::vector<Tensor> inputs, const char* op,
                      std::function<void(const detail::TensorImpl&)> backprop) {
  bool any_grad = false;
  for (const Tensor& t : inputs) any_grad = any_grad || t.requires_grad();
  auto impl = new_impl(std::move(shape), std::move(values), any_grad);
  if (any_grad) {
    auto edge = std::make_shared<detail::GraphEdge>();
    edge->op = op;
    edge->inputs = std::move(inputs);
    edge->backprop = std::move(backprop);
    impl->edge = std::move(edge);
  }
  return Tensor(std::move(impl));
}

double* grad_sink(const Tensor& t) {
  if (!t.requires_grad()) return nullptr;
  auto& impl = *t.impl();
  if (impl.grad.empty()) impl.grad.assign(impl.values->size(), 0.0);
  return impl.grad.data();
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::runtime_error("backward: loss must be a defined scalar tensor");

  // Iterative post-order DFS over producing edges; reverse gives topological
  // order with consumers ahead of producers.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  struct Frame {
    Tensor t;
    std::size_t next_input;
  };
  std::vector<Frame> stack;
  stack.push_back({loss, 0});
  seen.insert(loss.impl().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    auto& edge = f.t.impl()->edge;
    if (!edge || f.next_input >= edge->inputs.size()) {
      order.push_back(f.t.impl().get());
      stack.pop_back();
      continue;
    }
    Tensor in = edge->inputs[f.next_input++];
    if (in.impl()->edge && !seen.count(in.impl().get())) {
      seen.insert(in.impl().get());
      stack.push_back({in, 0});
    }
  }

  {
    auto& impl = *loss.impl();
    if (impl.grad.empty()) impl.grad.assign(1, 0.0);
    impl.grad[0] += 1.0;
  }

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* node = *it;
    if (!node->edge) continue;
    if (node->grad.empty()) continue;  // unreached along any gradient path
    node->edge->backprop(*node);
  }
}

}  // namespace morphtrack
