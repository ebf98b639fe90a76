#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "morphtrack/rng.hpp"

namespace morphtrack {

using Shape = std::vector<int>;

std::string shape_to_string(const Shape& s);
std::size_t shape_numel(const Shape& s);

class Tensor;

namespace detail {

struct TensorImpl;

/// Producing operation of a non-leaf tensor. `inputs` keeps the upstream
/// graph alive; `backprop` reads the output gradient (and, where needed,
/// the output values) and accumulates into the inputs' gradients.
struct GraphEdge {
  const char* op = "";
  std::vector<Tensor> inputs;
  std::function<void(const TensorImpl& out)> backprop;
};

struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<double>> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<GraphEdge> edge;
};

}  // namespace detail

/// Dense f64 tensor participating in a reverse-mode differentiation graph.
/// Value-semantic handle; the payload is shared and treated as immutable
/// once produced by an op. Leaf tensors (parameters, inputs) may be mutated
/// in place through mutable_data() between graph constructions.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int dim(int axis) const;
  std::size_t numel() const;
  bool is_scalar() const { return numel() == 1; }

  /// Scalar payload; throws unless numel()==1.
  double value() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();

  bool requires_grad() const;
  void set_requires_grad(bool rg);

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Shares values; requires_grad=false, no producing edge.
  Tensor detach() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}

  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor make_op_output(
      Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
      const char* op, std::function<void(const detail::TensorImpl&)> backprop);
};

/// Assembles an op result: attaches a graph edge iff some input requires
/// gradient, in which case the output requires gradient too.
Tensor make_op_output(Shape shape, std::vector<double> values,
                      std::vector<Tensor> inputs, const char* op,
                      std::function<void(const detail::TensorImpl&)> backprop);

/// Reverse-mode sweep from a scalar loss. Gradients accumulate; call
/// zero_grad on parameters between steps.
void backward(const Tensor& loss);

/// Gradient accumulation helper for op backward implementations. Returns a
/// raw pointer to the (lazily allocated, zero-initialized) gradient buffer
/// of `t`, or nullptr when `t` does not require gradient.
double* grad_sink(const Tensor& t);

}  // namespace morphtrack
