#include <cmath>
#include <stdexcept>

#include "morphtrack/ops.hpp"
#include "morphtrack/warp.hpp"

namespace morphtrack {

namespace {

inline double lerp(double a, double b, double t) { return a + t * (b - a); }

struct CellSample {
  int h0, h1, w0, w1, d0, d1;
  double fh, fw, fd;
  bool clamped_h, clamped_w, clamped_d;
};

inline CellSample locate(double sh, double sw, double sd, int h, int w, int d) {
  CellSample c{};
  c.clamped_h = sh <= 0.0 || sh >= h - 1;
  c.clamped_w = sw <= 0.0 || sw >= w - 1;
  c.clamped_d = sd <= 0.0 || sd >= d - 1;
  sh = std::min(std::max(sh, 0.0), static_cast<double>(h - 1));
  sw = std::min(std::max(sw, 0.0), static_cast<double>(w - 1));
  sd = std::min(std::max(sd, 0.0), static_cast<double>(d - 1));
  c.h0 = static_cast<int>(sh);
  c.w0 = static_cast<int>(sw);
  c.d0 = static_cast<int>(sd);
  c.h1 = std::min(c.h0 + 1, h - 1);
  c.w1 = std::min(c.w0 + 1, w - 1);
  c.d1 = std::min(c.d0 + 1, d - 1);
  c.fh = sh - c.h0;
  c.fw = sw - c.w0;
  c.fd = sd - c.d0;
  return c;
}

void check_shapes(const Tensor& vol, const Tensor& field) {
  if (vol.rank() != 4 || vol.dim(0) != 1)
    throw std::invalid_argument("apply_deformation: volume must be [1,H,W,D], got " +
                                shape_to_string(vol.shape()));
  if (field.rank() != 4 || field.dim(0) != 3)
    throw std::invalid_argument(
        "apply_deformation: field must be [3,H,W,D], got " +
        shape_to_string(field.shape()));
  for (int a = 1; a < 4; ++a)
    if (vol.dim(a) != field.dim(a))
      throw std::invalid_argument(
          "apply_deformation: spatial axis " + std::to_string(a) +
          " mismatch: volume " + shape_to_string(vol.shape()) + " vs field " +
          shape_to_string(field.shape()));
  for (double v : field.data())
    if (std::isnan(v))
      throw std::runtime_error(
          "apply_deformation: deformation field contains NaN");
}

}  // namespace

Tensor apply_deformation(const Tensor& vol, const Tensor& field) {
  check_shapes(vol, field);
  const int h = vol.dim(1), w = vol.dim(2), d = vol.dim(3);
  const std::size_t n = static_cast<std::size_t>(h) * w * d;
  const auto vv = vol.data();
  const auto fv = field.data();
  std::vector<double> out(n);
  for (int hh = 0; hh < h; ++hh) {
    for (int ww = 0; ww < w; ++ww) {
      for (int dd = 0; dd < d; ++dd) {
        const std::size_t p = (static_cast<std::size_t>(hh) * w + ww) * d + dd;
        const CellSample c = locate(hh + fv[p], ww + fv[n + p],
                                    dd + fv[2 * n + p], h, w, d);
        const double* b00 = vv.data() + (static_cast<std::size_t>(c.h0) * w + c.w0) * d;
        const double* b01 = vv.data() + (static_cast<std::size_t>(c.h0) * w + c.w1) * d;
        const double* b10 = vv.data() + (static_cast<std::size_t>(c.h1) * w + c.w0) * d;
        const double* b11 = vv.data() + (static_cast<std::size_t>(c.h1) * w + c.w1) * d;
        const double a00 = lerp(b00[c.d0], b00[c.d1], c.fd);
        const double a01 = lerp(b01[c.d0], b01[c.d1], c.fd);
        const double a10 = lerp(b10[c.d0], b10[c.d1], c.fd);
        const double a11 = lerp(b11[c.d0], b11[c.d1], c.fd);
        out[p] = lerp(lerp(a00, a01, c.fw), lerp(a10, a11, c.fw), c.fh);
      }
    }
  }
  return make_op_output(
      vol.shape(), std::move(out), {vol, field}, "apply_deformation",
      [vol, field, h, w, d, n](const detail::TensorImpl& o) {
        double* gv = grad_sink(vol);
        double* gf = grad_sink(field);
        if (!gv && !gf) return;
        const double* g = o.grad.data();
        const auto vv = vol.data();
        const auto fv = field.data();
        for (int hh = 0; hh < h; ++hh) {
          for (int ww = 0; ww < w; ++ww) {
            for (int dd = 0; dd < d; ++dd) {
              const std::size_t p =
                  (static_cast<std::size_t>(hh) * w + ww) * d + dd;
              const double gp = g[p];
              if (gp == 0.0) continue;
              const CellSample c = locate(hh + fv[p], ww + fv[n + p],
                                          dd + fv[2 * n + p], h, w, d);
              const std::size_t i00 =
                  (static_cast<std::size_t>(c.h0) * w + c.w0) * d;
              const std::size_t i01 =
                  (static_cast<std::size_t>(c.h0) * w + c.w1) * d;
              const std::size_t i10 =
                  (static_cast<std::size_t>(c.h1) * w + c.w0) * d;
              const std::size_t i11 =
                  (static_cast<std::size_t>(c.h1) * w + c.w1) * d;
              const double wh1 = c.fh, wh0 = 1.0 - c.fh;
              const double ww1 = c.fw, ww0 = 1.0 - c.fw;
              const double wd1 = c.fd, wd0 = 1.0 - c.fd;
              if (gv) {
                gv[i00 + c.d0] += gp * wh0 * ww0 * wd0;
                gv[i00 + c.d1] += gp * wh0 * ww0 * wd1;
                gv[i01 + c.d0] += gp * wh0 * ww1 * wd0;
                gv[i01 + c.d1] += gp * wh0 * ww1 * wd1;
                gv[i10 + c.d0] += gp * wh1 * ww0 * wd0;
                gv[i10 + c.d1] += gp * wh1 * ww0 * wd1;
                gv[i11 + c.d0] += gp * wh1 * ww1 * wd0;
                gv[i11 + c.d1] += gp * wh1 * ww1 * wd1;
              }
              if (gf) {
                const double c000 = vv[i00 + c.d0], c001 = vv[i00 + c.d1];
                const double c010 = vv[i01 + c.d0], c011 = vv[i01 + c.d1];
                const double c100 = vv[i10 + c.d0], c101 = vv[i10 + c.d1];
                const double c110 = vv[i11 + c.d0], c111 = vv[i11 + c.d1];
                if (!c.clamped_h) {
                  const double a0 = lerp(lerp(c000, c001, c.fd),
                                         lerp(c010, c011, c.fd), c.fw);
                  const double a1 = lerp(lerp(c100, c101, c.fd),
                                         lerp(c110, c111, c.fd), c.fw);
                  gf[p] += gp * (a1 - a0);
                }
                if (!c.clamped_w) {
                  const double dw0 = lerp(c010, c011, c.fd) - lerp(c000, c001, c.fd);
                  const double dw1 = lerp(c110, c111, c.fd) - lerp(c100, c101, c.fd);
                  gf[n + p] += gp * (wh0 * dw0 + wh1 * dw1);
                }
                if (!c.clamped_d) {
                  const double dd0 = ww0 * (c001 - c000) + ww1 * (c011 - c010);
                  const double dd1 = ww0 * (c101 - c100) + ww1 * (c111 - c110);
                  gf[2 * n + p] += gp * (wh0 * dd0 + wh1 * dd1);
                }
              }
            }
          }
        }
      });
}

Tensor morph(const Tensor& vol, const Tensor& field, const Tensor& add_map) {
  if (add_map.shape() != vol.shape())
    throw std::invalid_argument("morph: additive map shape " +
                                shape_to_string(add_map.shape()) +
                                " must match volume " +
                                shape_to_string(vol.shape()));
  return add(apply_deformation(vol, field), add_map);
}

Tensor warp_mask(const Tensor& mask, const Tensor& field) {
  for (double v : mask.data())
    if (v != 0.0 && v != 1.0)
      throw std::invalid_argument("warp_mask: mask must be binary {0,1}");
  return apply_deformation(mask, field);
}

Tensor resample_to(const Tensor& vol, int th, int tw, int td) {
  if (vol.rank() != 4)
    throw std::invalid_argument("resample_to: expected [C,H,W,D], got " +
                                shape_to_string(vol.shape()));
  if (th <= 0 || tw <= 0 || td <= 0)
    throw std::invalid_argument("resample_to: non-positive target dims");
  const int c = vol.dim(0), h = vol.dim(1), w = vol.dim(2), d = vol.dim(3);
  const auto vv = vol.data();
  std::vector<double> out(static_cast<std::size_t>(c) * th * tw * td);
  const std::size_t ch_in = static_cast<std::size_t>(h) * w * d;
  std::size_t o = 0;
  for (int ch = 0; ch < c; ++ch) {
    const double* vc = vv.data() + static_cast<std::size_t>(ch) * ch_in;
    for (int i = 0; i < th; ++i) {
      const double sh = (i + 0.5) * (static_cast<double>(h) / th) - 0.5;
      for (int j = 0; j < tw; ++j) {
        const double sw = (j + 0.5) * (static_cast<double>(w) / tw) - 0.5;
        for (int k = 0; k < td; ++k, ++o) {
          const double sd = (k + 0.5) * (static_cast<double>(d) / td) - 0.5;
          const CellSample cell = locate(sh, sw, sd, h, w, d);
          const double* b00 =
              vc + (static_cast<std::size_t>(cell.h0) * w + cell.w0) * d;
          const double* b01 =
              vc + (static_cast<std::size_t>(cell.h0) * w + cell.w1) * d;
          const double* b10 =
              vc + (static_cast<std::size_t>(cell.h1) * w + cell.w0) * d;
          const double* b11 =
              vc + (static_cast<std::size_t>(cell.h1) * w + cell.w1) * d;
          const double a00 = lerp(b00[cell.d0], b00[cell.d1], cell.fd);
          const double a01 = lerp(b01[cell.d0], b01[cell.d1], cell.fd);
          const double a10 = lerp(b10[cell.d0], b10[cell.d1], cell.fd);
          const double a11 = lerp(b11[cell.d0], b11[cell.d1], cell.fd);
          out[o] = lerp(lerp(a00, a01, cell.fw), lerp(a10, a11, cell.fw),
                        cell.fh);
        }
      }
    }
  }
  return Tensor::from_data(Shape{c, th, tw, td}, std::move(out));
}

}  // namespace morphtrack
