#include <cmath>
#include <stdexcept>

#include "morphtrack/ops.hpp"

namespace morphtrack {

namespace {

enum class BroadcastSide { None, Left, Right };

struct BinaryPlan {
  BroadcastSide bc = BroadcastSide::None;
  Shape out_shape;
  std::size_t n = 0;
};

BinaryPlan plan_binary(const Tensor& a, const Tensor& b, const char* op) {
  BinaryPlan plan;
  if (a.shape() == b.shape()) {
    plan.bc = BroadcastSide::None;
    plan.out_shape = a.shape();
  } else if (a.is_scalar()) {
    plan.bc = BroadcastSide::Left;
    plan.out_shape = b.shape();
  } else if (b.is_scalar()) {
    plan.bc = BroadcastSide::Right;
    plan.out_shape = a.shape();
  } else {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_to_string(a.shape()) + " vs " +
                                shape_to_string(b.shape()));
  }
  plan.n = shape_numel(plan.out_shape);
  return plan;
}

// Scalar-side gradients are reduced deterministically.
void accumulate_broadcast(double* sink, std::size_t n,
                          const std::function<double(std::size_t)>& f) {
  sink[0] += det_sum_n(n, f);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const BinaryPlan plan = plan_binary(a, b, "add");
  const auto av = a.data(), bv = b.data();
  std::vector<double> out(plan.n);
  switch (plan.bc) {
    case BroadcastSide::None:
      for (std::size_t i = 0; i < plan.n; ++i) out[i] = av[i] + bv[i];
      break;
    case BroadcastSide::Left:
      for (std::size_t i = 0; i < plan.n; ++i) out[i] = av[0] + bv[i];
      break;
    case BroadcastSide::Right:
      for (std::size_t i = 0; i < plan.n; ++i) out[i] = av[i] + bv[0];
      break;
  }
  const BroadcastSide bc = plan.bc;
  return make_op_output(
      plan.out_shape, std::move(out), {a, b}, "add",
      [a, b, bc](const detail::TensorImpl& o) {
        const double* g = o.grad.data();
        const std::size_t n = o.grad.size();
        if (double* ga = grad_sink(a)) {
          if (bc == BroadcastSide::Left)
            accumulate_broadcast(ga, n, [&](std::size_t i) { return g[i]; });
          else
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (double* gb = grad_sink(b)) {
          if (bc == BroadcastSide::Right)
            accumulate_broadcast(gb, n, [&](std::size_t i) { return g[i]; });
          else
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
        }
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const BinaryPlan plan = plan_binary(a, b, "sub");
  const auto av = a.data(), bv = b.data();
  std::vector<double> out(plan.n);
  switch (plan.bc) {
    case BroadcastSide::None:
      for (std::size_t i = 0; i < plan.n; ++i) out[i] = av[i] - bv[i];
      break;
    case BroadcastSide::Left:
      for (std::size_t i = 0; i < plan.n; ++i) out[i] = av[0] - bv[i];
      break;
    case BroadcastSide::Right:
      for (std::size_t i = 0; i < plan.n; ++i) out[i] = av[i] - bv[0];
      break;
  }
  const BroadcastSide bc = plan.bc;
  return make_op_output(
      plan.out_shape, std::move(out), {a, b}, "sub",
      [a, b, bc](const detail::TensorImpl& o) {
        const double* g = o.grad.data();
        const std::size_t n = o.grad.size();
        if (double* ga = grad_sink(a)) {
          if (bc == BroadcastSide::Left)
            accumulate_broadcast(ga, n, [&](std::size_t i) { return g[i]; });
          else
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (double* gb = grad_sink(b)) {
          if (bc == BroadcastSide::Right)
            accumulate_broadcast(gb, n, [&](std::size_t i) { return -g[i]; });
          else
            for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
        }
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const BinaryPlan plan = plan_binary(a, b, "mul");
  const auto av = a.data(), bv = b.data();
  std::vector<double> out(plan.n);
  switch (plan.bc) {
    case BroadcastSide::None:
      for (std::size_t i = 0; i < plan.n; ++i) out[i] = av[i] * bv[i];
      break;
    case BroadcastSide::Left:
      for (std::size_t i = 0; i < plan.n; ++i) out[i] = av[0] * bv[i];
      break;
    case BroadcastSide::Right:
      for (std::size_t i = 0; i < plan.n; ++i) out[i] = av[i] * bv[0];
      break;
  }
  const BroadcastSide bc = plan.bc;
  return make_op_output(
      plan.out_shape, std::move(out), {a, b}, "mul",
      [a, b, bc](const detail::TensorImpl& o) {
        const double* g = o.grad.data();
        const std::size_t n = o.grad.size();
        const auto av = a.data(), bv = b.data();
        if (double* ga = grad_sink(a)) {
          if (bc == BroadcastSide::Left)
            accumulate_broadcast(
                ga, n, [&](std::size_t i) { return g[i] * bv[i]; });
          else if (bc == BroadcastSide::Right)
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[0];
          else
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
        }
        if (double* gb = grad_sink(b)) {
          if (bc == BroadcastSide::Right)
            accumulate_broadcast(
                gb, n, [&](std::size_t i) { return g[i] * av[i]; });
          else if (bc == BroadcastSide::Left)
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[0];
          else
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
        }
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  const BinaryPlan plan = plan_binary(a, b, "div");
  const auto av = a.data(), bv = b.data();
  std::vector<double> out(plan.n);
  switch (plan.bc) {
    case BroadcastSide::None:
      for (std::size_t i = 0; i < plan.n; ++i) out[i] = av[i] / bv[i];
      break;
    case BroadcastSide::Left:
      for (std::size_t i = 0; i < plan.n; ++i) out[i] = av[0] / bv[i];
      break;
    case BroadcastSide::Right:
      for (std::size_t i = 0; i < plan.n; ++i) out[i] = av[i] / bv[0];
      break;
  }
  const BroadcastSide bc = plan.bc;
  return make_op_output(
      plan.out_shape, std::move(out), {a, b}, "div",
      [a, b, bc](const detail::TensorImpl& o) {
        const double* g = o.grad.data();
        const double* y = o.values->data();
        const std::size_t n = o.grad.size();
        const auto bv = b.data();
        if (double* ga = grad_sink(a)) {
          if (bc == BroadcastSide::Left)
            accumulate_broadcast(
                ga, n, [&](std::size_t i) { return g[i] / bv[i]; });
          else if (bc == BroadcastSide::Right)
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / bv[0];
          else
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / bv[i];
        }
        if (double* gb = grad_sink(b)) {
          if (bc == BroadcastSide::Right)
            accumulate_broadcast(gb, n, [&](std::size_t i) {
              return -g[i] * y[i] / bv[0];
            });
          else if (bc == BroadcastSide::Left)
            for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i] * y[i] / bv[i];
          else
            for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i] * y[i] / bv[i];
        }
      });
}

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& x, const char* name, Fwd fwd, Bwd dfdx) {
  const auto xv = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return make_op_output(x.shape(), std::move(out), {x}, name,
                        [x, dfdx](const detail::TensorImpl& o) {
                          double* gx = grad_sink(x);
                          if (!gx) return;
                          const double* g = o.grad.data();
                          const double* y = o.values->data();
                          const auto xv = x.data();
                          for (std::size_t i = 0; i < o.grad.size(); ++i)
                            gx[i] += g[i] * dfdx(xv[i], y[i]);
                        });
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  return x >= 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(
      a, "add_scalar", [c](double x) { return x + c; },
      [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary_op(
      a, "mul_scalar", [c](double x) { return x * c; },
      [c](double, double) { return c; });
}

Tensor sub_from_scalar(double c, const Tensor& a) {
  return unary_op(
      a, "sub_from_scalar", [c](double x) { return c - x; },
      [](double, double) { return -1.0; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor elu(const Tensor& x) {
  return unary_op(
      x, "elu", [](double v) { return v > 0.0 ? v : std::expm1(v); },
      [](double v, double y) { return v > 0.0 ? 1.0 : y + 1.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, "sigmoid", [](double v) { return stable_sigmoid(v); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& x) {
  return unary_op(
      x, "softplus", [](double v) { return stable_softplus(v); },
      [](double v, double) { return stable_sigmoid(v); });
}

Tensor activation(const Tensor& x, Activation kind) {
  switch (kind) {
    case Activation::Elu:
      return elu(x);
    case Activation::Sigmoid:
      return sigmoid(x);
    case Activation::Softplus:
      return softplus(x);
  }
  throw std::invalid_argument("activation: unknown kind");
}

Tensor log(const Tensor& x) {
  return unary_op(
      x, "log", [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      x, "abs", [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  return unary_op(
      x, "clamp",
      [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor xlogx(const Tensor& x) {
  return unary_op(
      x, "xlogx", [](double v) { return v > 0.0 ? v * std::log(v) : 0.0; },
      [](double v, double) { return v > 0.0 ? std::log(v) + 1.0 : 0.0; });
}

}  // namespace morphtrack
