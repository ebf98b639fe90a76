#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include "morphtrack/ops.hpp"

namespace morphtrack {

namespace detail {

double tree_combine(const double* p, std::size_t n) {
  if (n == 1) return p[0];
  const std::size_t half = std::bit_ceil(n) / 2;
  return tree_combine(p, half) + tree_combine(p + half, n - half);
}

}  // namespace detail

double det_sum(std::span<const double> v) {
  return det_sum_n(v.size(), [&](std::size_t i) { return v[i]; });
}

namespace {

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * static_cast<std::size_t>(s[i + 1]);
  return st;
}

// Axis-subset reduction plan: for each output element, the reduced elements
// are visited in increasing linear-index order (lexicographic over the
// reduced axes), keeping the summation order deterministic.
struct AxisPlan {
  Shape out_shape;
  std::vector<int> kept_axes, red_axes;
  std::vector<std::size_t> kept_sizes, red_sizes;
  std::vector<std::size_t> kept_strides, red_strides;
  std::size_t out_n = 1, red_n = 1;
};

AxisPlan plan_axes(const Tensor& x, std::vector<int> axes, const char* op) {
  const Shape& s = x.shape();
  if (axes.empty()) {
    axes.resize(s.size());
    std::iota(axes.begin(), axes.end(), 0);
  }
  std::sort(axes.begin(), axes.end());
  if (std::adjacent_find(axes.begin(), axes.end()) != axes.end())
    throw std::invalid_argument(std::string(op) + ": duplicate axis");
  for (int a : axes)
    if (a < 0 || a >= static_cast<int>(s.size()))
      throw std::invalid_argument(std::string(op) + ": axis " +
                                  std::to_string(a) +
                                  " out of range for shape " +
                                  shape_to_string(s));
  AxisPlan p;
  const auto strides = row_major_strides(s);
  std::size_t k = 0;
  for (int a = 0; a < static_cast<int>(s.size()); ++a) {
    if (k < axes.size() && axes[k] == a) {
      p.red_axes.push_back(a);
      p.red_sizes.push_back(static_cast<std::size_t>(s[a]));
      p.red_strides.push_back(strides[a]);
      p.red_n *= static_cast<std::size_t>(s[a]);
      ++k;
    } else {
      p.kept_axes.push_back(a);
      p.kept_sizes.push_back(static_cast<std::size_t>(s[a]));
      p.kept_strides.push_back(strides[a]);
      p.out_shape.push_back(s[a]);
      p.out_n *= static_cast<std::size_t>(s[a]);
    }
  }
  if (p.red_n == 0) throw std::invalid_argument(std::string(op) + ": empty reduction");
  return p;
}

std::size_t base_offset(const AxisPlan& p, std::size_t out_idx) {
  std::size_t off = 0, rem = out_idx;
  for (std::size_t i = 0; i < p.kept_sizes.size(); ++i) {
    std::size_t block = 1;
    for (std::size_t j = i + 1; j < p.kept_sizes.size(); ++j)
      block *= p.kept_sizes[j];
    const std::size_t coord = rem / block;
    rem %= block;
    off += coord * p.kept_strides[i];
  }
  return off;
}

std::size_t red_offset(const AxisPlan& p, std::size_t red_idx) {
  std::size_t off = 0, rem = red_idx;
  for (std::size_t i = 0; i < p.red_sizes.size(); ++i) {
    std::size_t block = 1;
    for (std::size_t j = i + 1; j < p.red_sizes.size(); ++j)
      block *= p.red_sizes[j];
    const std::size_t coord = rem / block;
    rem %= block;
    off += coord * p.red_strides[i];
  }
  return off;
}

Tensor reduce_sum_mean(const Tensor& x, const std::vector<int>& axes,
                       bool mean) {
  const char* name = mean ? "reduce_mean" : "reduce_sum";
  auto plan = std::make_shared<AxisPlan>(plan_axes(x, axes, name));
  const auto xv = x.data();
  const double scale = mean ? 1.0 / static_cast<double>(plan->red_n) : 1.0;
  std::vector<double> out(plan->out_n);

  if (plan->out_n == 1) {
    out[0] = det_sum_n(x.numel(), [&](std::size_t i) { return xv[i]; }) * scale;
  } else {
    // Precompute reduced offsets once; reused for every output element.
    std::vector<std::size_t> roffs(plan->red_n);
    for (std::size_t j = 0; j < plan->red_n; ++j)
      roffs[j] = red_offset(*plan, j);
    for (std::size_t o = 0; o < plan->out_n; ++o) {
      const std::size_t base = base_offset(*plan, o);
      out[o] = det_sum_n(plan->red_n, [&](std::size_t j) {
                 return xv[base + roffs[j]];
               }) *
               scale;
    }
  }
  return make_op_output(
      plan->out_shape, std::move(out), {x}, name,
      [x, plan, scale](const detail::TensorImpl& o) {
        double* gx = grad_sink(x);
        if (!gx) return;
        const double* g = o.grad.data();
        if (plan->out_n == 1) {
          const double gv = g[0] * scale;
          for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += gv;
          return;
        }
        std::vector<std::size_t> roffs(plan->red_n);
        for (std::size_t j = 0; j < plan->red_n; ++j)
          roffs[j] = red_offset(*plan, j);
        for (std::size_t o = 0; o < plan->out_n; ++o) {
          const std::size_t base = base_offset(*plan, o);
          const double gv = g[o] * scale;
          for (std::size_t j = 0; j < plan->red_n; ++j)
            gx[base + roffs[j]] += gv;
        }
      });
}

}  // namespace

Tensor reduce(const Tensor& x, Reduce kind, const std::vector<int>& axes) {
  switch (kind) {
    case Reduce::Sum:
      return reduce_sum_mean(x, axes, false);
    case Reduce::Mean:
      return reduce_sum_mean(x, axes, true);
    case Reduce::Gap: {
      if (!axes.empty())
        throw std::invalid_argument("reduce: gap does not take explicit axes");
      if (x.rank() < 1)
        throw std::invalid_argument("reduce: gap needs a channel axis");
      std::vector<int> spatial(static_cast<std::size_t>(x.rank()) - 1);
      std::iota(spatial.begin(), spatial.end(), 1);
      if (spatial.empty()) return reduce_sum_mean(x, {}, true);
      return reduce_sum_mean(x, spatial, true);
    }
    case Reduce::L1Norm: {
      if (!axes.empty())
        throw std::invalid_argument("reduce: l1norm reduces all elements");
      const auto xv = x.data();
      std::vector<double> out{det_sum_n(
          x.numel(), [&](std::size_t i) { return std::fabs(xv[i]); })};
      return make_op_output(
          Shape{}, std::move(out), {x}, "l1_norm",
          [x](const detail::TensorImpl& o) {
            double* gx = grad_sink(x);
            if (!gx) return;
            const double g = o.grad[0];
            const auto xv = x.data();
            for (std::size_t i = 0; i < x.numel(); ++i) {
              const double s =
                  xv[i] > 0.0 ? 1.0 : (xv[i] < 0.0 ? -1.0 : 0.0);
              gx[i] += g * s;
            }
          });
    }
    case Reduce::L2Norm: {
      if (!axes.empty())
        throw std::invalid_argument("reduce: l2norm reduces all elements");
      const auto xv = x.data();
      const double ss = det_sum_n(
          x.numel(), [&](std::size_t i) { return xv[i] * xv[i]; });
      std::vector<double> out{std::sqrt(ss)};
      return make_op_output(
          Shape{}, std::move(out), {x}, "l2_norm",
          [x](const detail::TensorImpl& o) {
            double* gx = grad_sink(x);
            if (!gx) return;
            const double y = (*o.values)[0];
            if (y == 0.0) return;  // subgradient 0 at the origin
            const double g = o.grad[0] / y;
            const auto xv = x.data();
            for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g * xv[i];
          });
    }
  }
  throw std::invalid_argument("reduce: unknown kind");
}

Tensor sum_all(const Tensor& x) { return reduce(x, Reduce::Sum); }
Tensor mean_all(const Tensor& x) { return reduce(x, Reduce::Mean); }
Tensor gap(const Tensor& x) { return reduce(x, Reduce::Gap); }
Tensor l1_norm(const Tensor& x) { return reduce(x, Reduce::L1Norm); }
Tensor l2_norm(const Tensor& x) { return reduce(x, Reduce::L2Norm); }

Tensor sum_squares(const Tensor& x) { return sum_all(mul(x, x)); }

namespace {

std::vector<std::size_t> pick_indices(std::size_t n, int max_elements,
                                      Rng* rng) {
  std::vector<std::size_t> idx;
  if (max_elements <= 0 || static_cast<std::size_t>(max_elements) >= n) {
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
  }
  if (!rng)
    throw std::invalid_argument("grad_check: sampling requires an rng");
  std::unordered_set<std::size_t> seen;
  while (idx.size() < static_cast<std::size_t>(max_elements)) {
    const auto i = static_cast<std::size_t>(
        rng->uniform_int(0, static_cast<std::int64_t>(n) - 1));
    if (seen.insert(i).second) idx.push_back(i);
  }
  std::sort(idx.begin(), idx.end());
  return idx;
}

double rel_error(double analytic, double numeric) {
  const double denom =
      std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return std::fabs(analytic - numeric) / denom;
}

}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                  double h, int max_elements, Rng* rng) {
  if (h <= 0.0) throw std::invalid_argument("grad_check: h must be positive");
  x.zero_grad();
  const bool prior = x.requires_grad();
  x.set_requires_grad(true);
  Tensor loss = f(x);
  if (!loss.is_scalar())
    throw std::invalid_argument("grad_check: f must return a scalar");
  backward(loss);
  std::vector<double> analytic(x.numel(), 0.0);
  if (x.has_grad()) {
    const auto g = x.grad();
    analytic.assign(g.begin(), g.end());
  }
  x.zero_grad();
  x.set_requires_grad(false);

  double max_err = 0.0;
  auto xs = x.mutable_data();
  for (std::size_t i : pick_indices(x.numel(), max_elements, rng)) {
    const double orig = xs[i];
    xs[i] = orig + h;
    const double fp = f(x).value();
    xs[i] = orig - h;
    const double fm = f(x).value();
    xs[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    max_err = std::max(max_err, rel_error(analytic[i], numeric));
  }
  x.set_requires_grad(prior);
  return max_err;
}

double grad_check_params(const std::function<Tensor()>& f,
                         std::span<Tensor> params, double h, int per_param,
                         Rng& rng) {
  if (h <= 0.0) throw std::invalid_argument("grad_check: h must be positive");
  for (Tensor& p : params) p.zero_grad();
  Tensor loss = f();
  if (!loss.is_scalar())
    throw std::invalid_argument("grad_check: f must return a scalar");
  backward(loss);

  double max_err = 0.0;
  for (Tensor& p : params) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) {
      const auto g = p.grad();
      analytic.assign(g.begin(), g.end());
    }
    auto ps = p.mutable_data();
    for (std::size_t i : pick_indices(p.numel(), per_param, &rng)) {
      const double orig = ps[i];
      ps[i] = orig + h;
      const double fp = f().value();
      ps[i] = orig - h;
      const double fm = f().value();
      ps[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      max_err = std::max(max_err, rel_error(analytic[i], numeric));
    }
  }
  for (Tensor& p : params) p.zero_grad();
  return max_err;
}

}  // namespace morphtrack
