#include <algorithm>
#include <stdexcept>
#include <string>

#include "morphtrack/ops.hpp"
#include "morphtrack/parallel.hpp"

namespace morphtrack {

namespace {

struct ConvDims {
  int cin, h, w, d;
  int cout, cg, kh, kw, kd;
  int sh, sw, sd;
  int oh, ow, od;
  int ph, pw, pd;
  int groups, cout_per_group;
};

int ceil_div(int a, int b) { return (a + b - 1) / b; }

ConvDims check_conv(const Tensor& input, const Tensor& weight,
                    const Tensor& bias, Stride3 stride, int groups) {
  if (input.rank() != 4)
    throw std::invalid_argument("conv3d: input must be [C,H,W,D], got " +
                                shape_to_string(input.shape()));
  if (weight.rank() != 5)
    throw std::invalid_argument(
        "conv3d: weights must be [C_out,C_in/groups,kh,kw,kd], got " +
        shape_to_string(weight.shape()));
  ConvDims dm{};
  dm.cin = input.dim(0);
  dm.h = input.dim(1);
  dm.w = input.dim(2);
  dm.d = input.dim(3);
  dm.cout = weight.dim(0);
  dm.cg = weight.dim(1);
  dm.kh = weight.dim(2);
  dm.kw = weight.dim(3);
  dm.kd = weight.dim(4);
  dm.sh = stride.h;
  dm.sw = stride.w;
  dm.sd = stride.d;
  dm.groups = groups;
  if (groups < 1)
    throw std::invalid_argument("conv3d: groups must be >= 1");
  if (dm.kh % 2 == 0 || dm.kw % 2 == 0 || dm.kd % 2 == 0)
    throw std::invalid_argument(
        "conv3d: kernel dims must be odd on every axis, got " +
        shape_to_string({dm.kh, dm.kw, dm.kd}));
  if (dm.sh < 1 || dm.sw < 1 || dm.sd < 1)
    throw std::invalid_argument("conv3d: strides must be >= 1");
  if (dm.cin % groups != 0)
    throw std::invalid_argument(
        "conv3d: input channel axis (" + std::to_string(dm.cin) +
        ") not divisible by groups (" + std::to_string(groups) + ")");
  if (dm.cg != dm.cin / groups)
    throw std::invalid_argument(
        "conv3d: weight channel axis expects " +
        std::to_string(dm.cin / groups) + " (=C_in/groups), got " +
        std::to_string(dm.cg));
  if (dm.cout % groups != 0)
    throw std::invalid_argument(
        "conv3d: output channel axis (" + std::to_string(dm.cout) +
        ") not divisible by groups (" + std::to_string(groups) + ")");
  if (bias.defined() && bias.shape() != Shape{dm.cout})
    throw std::invalid_argument(
        "conv3d: bias axis must match output channels [" +
        std::to_string(dm.cout) + "], got " + shape_to_string(bias.shape()));
  dm.oh = ceil_div(dm.h, dm.sh);
  dm.ow = ceil_div(dm.w, dm.sw);
  dm.od = ceil_div(dm.d, dm.sd);
  dm.ph = (dm.kh - 1) / 2;
  dm.pw = (dm.kw - 1) / 2;
  dm.pd = (dm.kd - 1) / 2;
  dm.cout_per_group = dm.cout / groups;
  return dm;
}

// Output index range [lo,hi) such that o*stride+off stays inside [0,size).
inline void out_range(int off, int stride, int in_size, int out_size, int& lo,
                      int& hi) {
  lo = off >= 0 ? 0 : ceil_div(-off, stride);
  const int last = in_size - 1 - off;
  hi = last < 0 ? 0 : std::min(out_size, last / stride + 1);
}

void conv_forward(const ConvDims& dm, const double* in, const double* wt,
                  const double* bs, double* out) {
  const std::size_t in_ch = static_cast<std::size_t>(dm.h) * dm.w * dm.d;
  const std::size_t out_ch = static_cast<std::size_t>(dm.oh) * dm.ow * dm.od;
  const std::size_t k_all = static_cast<std::size_t>(dm.kh) * dm.kw * dm.kd;
  parallel_for(dm.cout, [&](int co_lo, int co_hi) {
    for (int co = co_lo; co < co_hi; ++co) {
      const int grp = co / dm.cout_per_group;
      double* oc = out + static_cast<std::size_t>(co) * out_ch;
      const double b = bs ? bs[co] : 0.0;
      std::fill(oc, oc + out_ch, b);
      for (int cig = 0; cig < dm.cg; ++cig) {
        const int ci = grp * dm.cg + cig;
        const double* icp = in + static_cast<std::size_t>(ci) * in_ch;
        const double* wc =
            wt + (static_cast<std::size_t>(co) * dm.cg + cig) * k_all;
        for (int khi = 0; khi < dm.kh; ++khi) {
          const int off_h = khi - dm.ph;
          int lo_h, hi_h;
          out_range(off_h, dm.sh, dm.h, dm.oh, lo_h, hi_h);
          for (int kwi = 0; kwi < dm.kw; ++kwi) {
            const int off_w = kwi - dm.pw;
            int lo_w, hi_w;
            out_range(off_w, dm.sw, dm.w, dm.ow, lo_w, hi_w);
            for (int kdi = 0; kdi < dm.kd; ++kdi) {
              const int off_d = kdi - dm.pd;
              int lo_d, hi_d;
              out_range(off_d, dm.sd, dm.d, dm.od, lo_d, hi_d);
              const double wv =
                  wc[(static_cast<std::size_t>(khi) * dm.kw + kwi) * dm.kd +
                     kdi];
              if (wv == 0.0) continue;
              for (int oh = lo_h; oh < hi_h; ++oh) {
                const int ih = oh * dm.sh + off_h;
                for (int ow = lo_w; ow < hi_w; ++ow) {
                  const int iw = ow * dm.sw + off_w;
                  const double* irow =
                      icp + (static_cast<std::size_t>(ih) * dm.w + iw) * dm.d;
                  double* orow =
                      oc + (static_cast<std::size_t>(oh) * dm.ow + ow) * dm.od;
                  if (dm.sd == 1) {
                    const double* ir = irow + off_d;
                    for (int od = lo_d; od < hi_d; ++od)
                      orow[od] += wv * ir[od];
                  } else {
                    for (int od = lo_d; od < hi_d; ++od)
                      orow[od] += wv * irow[od * dm.sd + off_d];
                  }
                }
              }
            }
          }
        }
      }
    }
  });
}

void conv_backward_input(const ConvDims& dm, const double* g, const double* wt,
                         double* gin) {
  const std::size_t in_ch = static_cast<std::size_t>(dm.h) * dm.w * dm.d;
  const std::size_t out_ch = static_cast<std::size_t>(dm.oh) * dm.ow * dm.od;
  const std::size_t k_all = static_cast<std::size_t>(dm.kh) * dm.kw * dm.kd;
  parallel_for(dm.cin, [&](int ci_lo, int ci_hi) {
    for (int ci = ci_lo; ci < ci_hi; ++ci) {
      const int grp = ci / dm.cg;
      const int cig = ci % dm.cg;
      double* gc = gin + static_cast<std::size_t>(ci) * in_ch;
      for (int co = grp * dm.cout_per_group; co < (grp + 1) * dm.cout_per_group;
           ++co) {
        const double* goc = g + static_cast<std::size_t>(co) * out_ch;
        const double* wc =
            wt + (static_cast<std::size_t>(co) * dm.cg + cig) * k_all;
        for (int khi = 0; khi < dm.kh; ++khi) {
          const int off_h = khi - dm.ph;
          int lo_h, hi_h;
          out_range(off_h, dm.sh, dm.h, dm.oh, lo_h, hi_h);
          for (int kwi = 0; kwi < dm.kw; ++kwi) {
            const int off_w = kwi - dm.pw;
            int lo_w, hi_w;
            out_range(off_w, dm.sw, dm.w, dm.ow, lo_w, hi_w);
            for (int kdi = 0; kdi < dm.kd; ++kdi) {
              const int off_d = kdi - dm.pd;
              int lo_d, hi_d;
              out_range(off_d, dm.sd, dm.d, dm.od, lo_d, hi_d);
              const double wv =
                  wc[(static_cast<std::size_t>(khi) * dm.kw + kwi) * dm.kd +
                     kdi];
              if (wv == 0.0) continue;
              for (int oh = lo_h; oh < hi_h; ++oh) {
                const int ih = oh * dm.sh + off_h;
                for (int ow = lo_w; ow < hi_w; ++ow) {
                  const int iw = ow * dm.sw + off_w;
                  double* grow =
                      gc + (static_cast<std::size_t>(ih) * dm.w + iw) * dm.d;
                  const double* gorow =
                      goc + (static_cast<std::size_t>(oh) * dm.ow + ow) * dm.od;
                  if (dm.sd == 1) {
                    double* gr = grow + off_d;
                    for (int od = lo_d; od < hi_d; ++od)
                      gr[od] += wv * gorow[od];
                  } else {
                    for (int od = lo_d; od < hi_d; ++od)
                      grow[od * dm.sd + off_d] += wv * gorow[od];
                  }
                }
              }
            }
          }
        }
      }
    }
  });
}

void conv_backward_weight(const ConvDims& dm, const double* g, const double* in,
                          double* gw) {
  const std::size_t in_ch = static_cast<std::size_t>(dm.h) * dm.w * dm.d;
  const std::size_t out_ch = static_cast<std::size_t>(dm.oh) * dm.ow * dm.od;
  const std::size_t k_all = static_cast<std::size_t>(dm.kh) * dm.kw * dm.kd;
  parallel_for(dm.cout, [&](int co_lo, int co_hi) {
    for (int co = co_lo; co < co_hi; ++co) {
      const int grp = co / dm.cout_per_group;
      const double* goc = g + static_cast<std::size_t>(co) * out_ch;
      for (int cig = 0; cig < dm.cg; ++cig) {
        const int ci = grp * dm.cg + cig;
        const double* icp = in + static_cast<std::size_t>(ci) * in_ch;
        double* gwc =
            gw + (static_cast<std::size_t>(co) * dm.cg + cig) * k_all;
        for (int khi = 0; khi < dm.kh; ++khi) {
          const int off_h = khi - dm.ph;
          int lo_h, hi_h;
          out_range(off_h, dm.sh, dm.h, dm.oh, lo_h, hi_h);
          for (int kwi = 0; kwi < dm.kw; ++kwi) {
            const int off_w = kwi - dm.pw;
            int lo_w, hi_w;
            out_range(off_w, dm.sw, dm.w, dm.ow, lo_w, hi_w);
            for (int kdi = 0; kdi < dm.kd; ++kdi) {
              const int off_d = kdi - dm.pd;
              int lo_d, hi_d;
              out_range(off_d, dm.sd, dm.d, dm.od, lo_d, hi_d);
              double acc = 0.0;
              for (int oh = lo_h; oh < hi_h; ++oh) {
                const int ih = oh * dm.sh + off_h;
                for (int ow = lo_w; ow < hi_w; ++ow) {
                  const int iw = ow * dm.sw + off_w;
                  const double* irow =
                      icp + (static_cast<std::size_t>(ih) * dm.w + iw) * dm.d;
                  const double* gorow =
                      goc + (static_cast<std::size_t>(oh) * dm.ow + ow) * dm.od;
                  if (dm.sd == 1) {
                    const double* ir = irow + off_d;
                    for (int od = lo_d; od < hi_d; ++od)
                      acc += gorow[od] * ir[od];
                  } else {
                    for (int od = lo_d; od < hi_d; ++od)
                      acc += gorow[od] * irow[od * dm.sd + off_d];
                  }
                }
              }
              gwc[(static_cast<std::size_t>(khi) * dm.kw + kwi) * dm.kd +
                  kdi] += acc;
            }
          }
        }
      }
    }
  });
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              Stride3 stride, int groups) {
  const ConvDims dm = check_conv(input, weight, bias, stride, groups);
  std::vector<double> out(static_cast<std::size_t>(dm.cout) * dm.oh * dm.ow *
                          dm.od);
  conv_forward(dm, input.data().data(), weight.data().data(),
               bias.defined() ? bias.data().data() : nullptr, out.data());

  std::vector<Tensor> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_op_output(
      Shape{dm.cout, dm.oh, dm.ow, dm.od}, std::move(out), std::move(inputs),
      "conv3d", [input, weight, bias, dm](const detail::TensorImpl& o) {
        const double* g = o.grad.data();
        if (double* gi = grad_sink(input))
          conv_backward_input(dm, g, weight.data().data(), gi);
        if (double* gw = grad_sink(weight))
          conv_backward_weight(dm, g, input.data().data(), gw);
        if (bias.defined()) {
          if (double* gb = grad_sink(bias)) {
            const std::size_t out_ch =
                static_cast<std::size_t>(dm.oh) * dm.ow * dm.od;
            for (int co = 0; co < dm.cout; ++co) {
              const double* goc = g + static_cast<std::size_t>(co) * out_ch;
              gb[co] +=
                  det_sum_n(out_ch, [&](std::size_t i) { return goc[i]; });
            }
          }
        }
      });
}

}  // namespace morphtrack
