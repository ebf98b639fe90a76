#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "morphtrack/ops.hpp"

namespace morphtrack {

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (first.empty())
    throw std::invalid_argument("concat: inputs must have a channel axis");
  Shape out_shape = first;
  out_shape[0] = 0;
  for (const Tensor& t : parts) {
    const Shape& s = t.shape();
    if (s.size() != first.size() ||
        !std::equal(s.begin() + 1, s.end(), first.begin() + 1))
      throw std::invalid_argument(
          "concat: trailing dims mismatch: " + shape_to_string(s) + " vs " +
          shape_to_string(first));
    out_shape[0] += s[0];
  }
  std::vector<double> out;
  out.reserve(shape_numel(out_shape));
  for (const Tensor& t : parts) {
    const auto v = t.data();
    out.insert(out.end(), v.begin(), v.end());
  }
  return make_op_output(out_shape, std::move(out), parts, "concat",
                        [parts](const detail::TensorImpl& o) {
                          const double* g = o.grad.data();
                          std::size_t off = 0;
                          for (const Tensor& t : parts) {
                            const std::size_t n = t.numel();
                            if (double* gt = grad_sink(t)) {
                              for (std::size_t i = 0; i < n; ++i)
                                gt[i] += g[off + i];
                            }
                            off += n;
                          }
                        });
}

Tensor narrow(const Tensor& x, int start, int len) {
  if (x.rank() < 1)
    throw std::invalid_argument("narrow: input needs a channel axis");
  const int c = x.dim(0);
  if (start < 0 || len < 1 || start + len > c)
    throw std::invalid_argument("narrow: slice [" + std::to_string(start) +
                                "," + std::to_string(start + len) +
                                ") out of range for channel axis " +
                                std::to_string(c));
  const std::size_t block = x.numel() / static_cast<std::size_t>(c);
  const std::size_t off = static_cast<std::size_t>(start) * block;
  const std::size_t n = static_cast<std::size_t>(len) * block;
  const auto xv = x.data();
  Shape out_shape = x.shape();
  out_shape[0] = len;
  std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(off),
                          xv.begin() + static_cast<std::ptrdiff_t>(off + n));
  return make_op_output(out_shape, std::move(out), {x}, "narrow",
                        [x, off](const detail::TensorImpl& o) {
                          if (double* gx = grad_sink(x)) {
                            const double* g = o.grad.data();
                            for (std::size_t i = 0; i < o.grad.size(); ++i)
                              gx[off + i] += g[i];
                          }
                        });
}

Tensor scale_channels(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  if (x.rank() < 1)
    throw std::invalid_argument("scale_channels: x needs a channel axis");
  const int c = x.dim(0);
  if (gain.shape() != Shape{c} || bias.shape() != Shape{c})
    throw std::invalid_argument(
        "scale_channels: gain/bias must be shaped [" + std::to_string(c) + "]");
  const std::size_t block = x.numel() / static_cast<std::size_t>(c);
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  std::vector<double> out(x.numel());
  for (int ch = 0; ch < c; ++ch) {
    const std::size_t base = static_cast<std::size_t>(ch) * block;
    for (std::size_t j = 0; j < block; ++j)
      out[base + j] = xv[base + j] * gv[ch] + bv[ch];
  }
  return make_op_output(
      x.shape(), std::move(out), {x, gain, bias}, "scale_channels",
      [x, gain, bias, c, block](const detail::TensorImpl& o) {
        const double* g = o.grad.data();
        const auto xv = x.data();
        const auto gv = gain.data();
        if (double* gx = grad_sink(x)) {
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = static_cast<std::size_t>(ch) * block;
            for (std::size_t j = 0; j < block; ++j)
              gx[base + j] += g[base + j] * gv[ch];
          }
        }
        if (double* gg = grad_sink(gain)) {
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = static_cast<std::size_t>(ch) * block;
            gg[ch] += det_sum_n(block, [&](std::size_t j) {
              return g[base + j] * xv[base + j];
            });
          }
        }
        if (double* gb = grad_sink(bias)) {
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = static_cast<std::size_t>(ch) * block;
            gb[ch] += det_sum_n(block,
                                [&](std::size_t j) { return g[base + j]; });
          }
        }
      });
}

Tensor forward_diff(const Tensor& x, int axis) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw std::invalid_argument("forward_diff: axis " + std::to_string(axis) +
                                " out of range for shape " +
                                shape_to_string(s));
  const std::size_t n = x.numel();
  std::size_t stride = 1;
  for (int a = static_cast<int>(s.size()) - 1; a > axis; --a)
    stride *= static_cast<std::size_t>(s[a]);
  const std::size_t len = static_cast<std::size_t>(s[axis]);
  const std::size_t outer_block = stride * len;
  const auto xv = x.data();
  std::vector<double> out(n, 0.0);
  for (std::size_t base = 0; base < n; base += outer_block) {
    for (std::size_t i = 0; i + 1 < len; ++i) {
      const std::size_t row = base + i * stride;
      for (std::size_t j = 0; j < stride; ++j)
        out[row + j] = xv[row + stride + j] - xv[row + j];
    }
  }
  return make_op_output(
      s, std::move(out), {x}, "forward_diff",
      [x, stride, len, outer_block](const detail::TensorImpl& o) {
        double* gx = grad_sink(x);
        if (!gx) return;
        const double* g = o.grad.data();
        const std::size_t n = o.grad.size();
        for (std::size_t base = 0; base < n; base += outer_block) {
          for (std::size_t i = 0; i + 1 < len; ++i) {
            const std::size_t row = base + i * stride;
            for (std::size_t j = 0; j < stride; ++j) {
              gx[row + stride + j] += g[row + j];
              gx[row + j] -= g[row + j];
            }
          }
        }
      });
}

Tensor layer_norm(const Tensor& x, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be > 0");
  const std::size_t n = x.numel();
  if (n == 0) throw std::invalid_argument("layer_norm: empty input");
  const auto xv = x.data();
  const double inv_n = 1.0 / static_cast<double>(n);
  // Mean accumulated relative to the first element: constant inputs get an
  // exact mean and therefore an exactly zero output.
  const double mu =
      xv[0] +
      det_sum_n(n, [&](std::size_t i) { return xv[i] - xv[0]; }) * inv_n;
  const double var = det_sum_n(n, [&](std::size_t i) {
                       const double d = xv[i] - mu;
                       return d * d;
                     }) *
                     inv_n;
  const double sd = std::sqrt(var + eps);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = (xv[i] - mu) / sd;
  return make_op_output(
      x.shape(), std::move(out), {x}, "layer_norm",
      [x, sd, inv_n](const detail::TensorImpl& o) {
        double* gx = grad_sink(x);
        if (!gx) return;
        const double* g = o.grad.data();
        const double* y = o.values->data();
        const std::size_t n = o.grad.size();
        const double gmean =
            det_sum_n(n, [&](std::size_t i) { return g[i]; }) * inv_n;
        const double gy =
            det_sum_n(n, [&](std::size_t i) { return g[i] * y[i]; }) * inv_n;
        for (std::size_t i = 0; i < n; ++i)
          gx[i] += (g[i] - gmean - y[i] * gy) / sd;
      });
}

namespace {

struct AxisSample {
  int i0, i1;
  double f;
};

std::vector<AxisSample> resize_axis(int in_size, int scale) {
  const int out_size = in_size * scale;
  std::vector<AxisSample> m(static_cast<std::size_t>(out_size));
  for (int o = 0; o < out_size; ++o) {
    double src = (o + 0.5) / scale - 0.5;
    src = std::min(std::max(src, 0.0), static_cast<double>(in_size - 1));
    const int i0 = static_cast<int>(src);
    m[static_cast<std::size_t>(o)] = {i0, std::min(i0 + 1, in_size - 1),
                                      src - i0};
  }
  return m;
}

inline double lerp(double a, double b, double t) { return a + t * (b - a); }

}  // namespace

Tensor trilinear_resize(const Tensor& x, int depth_scale) {
  if (x.rank() != 4)
    throw std::invalid_argument("trilinear_resize: expected [C,H,W,D], got " +
                                shape_to_string(x.shape()));
  if (depth_scale != 1 && depth_scale != 2)
    throw std::invalid_argument("trilinear_resize: depth scale must be 1 or 2");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2), d = x.dim(3);
  const int oh = 2 * h, ow = 2 * w, od = depth_scale * d;
  auto mh = std::make_shared<std::vector<AxisSample>>(resize_axis(h, 2));
  auto mw = std::make_shared<std::vector<AxisSample>>(resize_axis(w, 2));
  auto md =
      std::make_shared<std::vector<AxisSample>>(resize_axis(d, depth_scale));

  const auto xv = x.data();
  std::vector<double> out(
      static_cast<std::size_t>(c) * oh * ow * od);
  const std::size_t in_ch = static_cast<std::size_t>(h) * w * d;
  std::size_t o = 0;
  for (int ch = 0; ch < c; ++ch) {
    const double* xc = xv.data() + static_cast<std::size_t>(ch) * in_ch;
    for (int i = 0; i < oh; ++i) {
      const AxisSample& ah = (*mh)[static_cast<std::size_t>(i)];
      for (int j = 0; j < ow; ++j) {
        const AxisSample& aw = (*mw)[static_cast<std::size_t>(j)];
        const double* r00 = xc + (static_cast<std::size_t>(ah.i0) * w + aw.i0) * d;
        const double* r01 = xc + (static_cast<std::size_t>(ah.i0) * w + aw.i1) * d;
        const double* r10 = xc + (static_cast<std::size_t>(ah.i1) * w + aw.i0) * d;
        const double* r11 = xc + (static_cast<std::size_t>(ah.i1) * w + aw.i1) * d;
        for (int k = 0; k < od; ++k, ++o) {
          const AxisSample& ad = (*md)[static_cast<std::size_t>(k)];
          const double v00 = lerp(r00[ad.i0], r00[ad.i1], ad.f);
          const double v01 = lerp(r01[ad.i0], r01[ad.i1], ad.f);
          const double v10 = lerp(r10[ad.i0], r10[ad.i1], ad.f);
          const double v11 = lerp(r11[ad.i0], r11[ad.i1], ad.f);
          out[o] = lerp(lerp(v00, v01, aw.f), lerp(v10, v11, aw.f), ah.f);
        }
      }
    }
  }
  return make_op_output(
      Shape{c, oh, ow, od}, std::move(out), {x}, "trilinear_resize",
      [x, mh, mw, md, c, h, w, d, oh, ow, od](const detail::TensorImpl& o) {
        double* gx = grad_sink(x);
        if (!gx) return;
        const double* g = o.grad.data();
        const std::size_t in_ch = static_cast<std::size_t>(h) * w * d;
        std::size_t oi = 0;
        for (int ch = 0; ch < c; ++ch) {
          double* gc = gx + static_cast<std::size_t>(ch) * in_ch;
          for (int i = 0; i < oh; ++i) {
            const AxisSample& ah = (*mh)[static_cast<std::size_t>(i)];
            for (int j = 0; j < ow; ++j) {
              const AxisSample& aw = (*mw)[static_cast<std::size_t>(j)];
              const std::size_t b00 =
                  (static_cast<std::size_t>(ah.i0) * w + aw.i0) * d;
              const std::size_t b01 =
                  (static_cast<std::size_t>(ah.i0) * w + aw.i1) * d;
              const std::size_t b10 =
                  (static_cast<std::size_t>(ah.i1) * w + aw.i0) * d;
              const std::size_t b11 =
                  (static_cast<std::size_t>(ah.i1) * w + aw.i1) * d;
              const double wh1 = ah.f, wh0 = 1.0 - ah.f;
              const double ww1 = aw.f, ww0 = 1.0 - aw.f;
              for (int k = 0; k < od; ++k, ++oi) {
                const AxisSample& ad = (*md)[static_cast<std::size_t>(k)];
                const double gv = g[oi];
                const double wd1 = ad.f, wd0 = 1.0 - ad.f;
                gc[b00 + ad.i0] += gv * wh0 * ww0 * wd0;
                gc[b00 + ad.i1] += gv * wh0 * ww0 * wd1;
                gc[b01 + ad.i0] += gv * wh0 * ww1 * wd0;
                gc[b01 + ad.i1] += gv * wh0 * ww1 * wd1;
                gc[b10 + ad.i0] += gv * wh1 * ww0 * wd0;
                gc[b10 + ad.i1] += gv * wh1 * ww0 * wd1;
                gc[b11 + ad.i0] += gv * wh1 * ww1 * wd0;
                gc[b11 + ad.i1] += gv * wh1 * ww1 * wd1;
              }
            }
          }
        }
      });
}

}  // namespace morphtrack
