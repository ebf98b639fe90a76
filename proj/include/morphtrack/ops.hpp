#pragma once

#include <bit>
#include <functional>
#include <span>
#include <vector>

#include "morphtrack/tensor.hpp"

namespace morphtrack {

// ---------------------------------------------------------------------------
// Deterministic reduction
// ---------------------------------------------------------------------------

namespace detail {
double tree_combine(const double* p, std::size_t n);
}

/// Deterministic summation: consecutive chunks of 128 elements accumulated
/// left to right, chunk partials combined by a fixed binary tree that splits
/// at bit_ceil(n)/2. The result is a pure function of the value sequence, so
/// it is bit-stable across runs and thread counts.
template <class F>
double det_sum_n(std::size_t n, F&& f) {
  constexpr std::size_t kChunk = 128;
  if (n == 0) return 0.0;
  const std::size_t nchunks = (n + kChunk - 1) / kChunk;
  if (nchunks == 1) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += f(i);
    return s;
  }
  std::vector<double> partial(nchunks);
  for (std::size_t c = 0; c < nchunks; ++c) {
    const std::size_t lo = c * kChunk;
    const std::size_t hi = std::min(n, lo + kChunk);
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += f(i);
    partial[c] = s;
  }
  return detail::tree_combine(partial.data(), nchunks);
}

double det_sum(std::span<const double> v);

// ---------------------------------------------------------------------------
// Elementwise arithmetic (same shape, or one operand scalar)
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor sub_from_scalar(double c, const Tensor& a);  // c - a
Tensor neg(const Tensor& a);

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

enum class Activation { Elu, Sigmoid, Softplus };

Tensor activation(const Tensor& x, Activation kind);
Tensor elu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);

Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
/// max(0,x); subgradient at 0 is 0.
Tensor relu(const Tensor& x);
/// Pass-through gradient strictly inside (lo,hi), zero where clamped.
Tensor clamp(const Tensor& x, double lo, double hi);
/// x*ln(x) with the 0*ln(0):=0 convention (value and gradient 0 at x<=0).
Tensor xlogx(const Tensor& x);

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

enum class Reduce { Sum, Mean, Gap, L2Norm, L1Norm };

/// Sum/Mean collapse the given axes (empty = all axes). Gap averages over
/// every axis but 0, yielding per-channel means. L1Norm/L2Norm reduce over
/// all elements to a scalar; `axes` must be empty for them.
Tensor reduce(const Tensor& x, Reduce kind, const std::vector<int>& axes = {});

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor gap(const Tensor& x);
Tensor l1_norm(const Tensor& x);
Tensor l2_norm(const Tensor& x);
Tensor sum_squares(const Tensor& x);

// ---------------------------------------------------------------------------
// Shape / structure
// ---------------------------------------------------------------------------

/// Concatenation along axis 0 (channels). All trailing dims must agree.
Tensor concat(const std::vector<Tensor>& parts);

/// Contiguous channel slice [start, start+len) along axis 0.
Tensor narrow(const Tensor& x, int start, int len);

/// Per-channel affine y[c,...] = x[c,...]*gain[c] + bias[c] for rank>=1 x
/// with gain/bias of shape [C].
Tensor scale_channels(const Tensor& x, const Tensor& gain, const Tensor& bias);

/// Forward difference along `axis`: out[i] = x[i+1]-x[i], last slice 0.
Tensor forward_diff(const Tensor& x, int axis);

// ---------------------------------------------------------------------------
// Normalization, convolution, resampling
// ---------------------------------------------------------------------------

/// Normalizes over all elements of x (channel+spatial axes of a batch-free
/// feature map): zero mean, unit variance before any learned affine.
Tensor layer_norm(const Tensor& x, double eps = 1e-5);

struct Stride3 {
  int h = 1, w = 1, d = 1;
};

/// 3D cross-correlation over [C,H,W,D] with weights [C_out,C_in/groups,
/// kh,kw,kd], odd kernels, symmetric zero padding (k-1)/2 per axis; output
/// spatial size is ceil(size/stride). Pass an undefined bias for none.
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              Stride3 stride = {}, int groups = 1);

/// Trilinear upsampling of [C,H,W,D] by (2,2,depth_scale), align-corners
/// false, border-clamped source coordinates. depth_scale in {1,2}.
/// Constant fields are preserved exactly (nested-lerp evaluation).
Tensor trilinear_resize(const Tensor& x, int depth_scale);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Max over checked elements of |analytic - central difference| /
/// max(|analytic|,|numeric|,1e-8). Checks every element of x unless
/// max_elements>0, in which case that many are sampled with `rng`.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                  double h, int max_elements = 0, Rng* rng = nullptr);

/// Same, over a set of parameter tensors with `per_param` sampled elements
/// each (0 = all). `f` recomputes the scalar loss from current parameter
/// values.
double grad_check_params(const std::function<Tensor()>& f,
                         std::span<Tensor> params, double h, int per_param,
                         Rng& rng);

}  // namespace morphtrack
