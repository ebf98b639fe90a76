#include "morphtrack/ssl_loss.hpp"

#include <stdexcept>

#include "morphtrack/warp.hpp"

namespace morphtrack {

namespace {

Tensor frozen_clone(const Tensor& t) {
  if (!t.defined()) return Tensor();
  const auto d = t.data();
  return Tensor::from_data(t.shape(), std::vector<double>(d.begin(), d.end()),
                           false);
}

OrientedConv clone_frozen(const OrientedConv& src) {
  OrientedConv o = src;
  o.w_ip = frozen_clone(src.w_ip);
  o.b_ip = frozen_clone(src.b_ip);
  o.w_ef = frozen_clone(src.w_ef);
  o.b_ef = frozen_clone(src.b_ef);
  o.w_cr = frozen_clone(src.w_cr);
  o.b_cr = frozen_clone(src.b_cr);
  return o;
}

S3DConv clone_frozen(const S3DConv& src) {
  S3DConv s = src;
  s.ln_gain = frozen_clone(src.ln_gain);
  s.ln_bias = frozen_clone(src.ln_bias);
  s.conv = clone_frozen(src.conv);
  return s;
}

EncoderBlock clone_frozen(const EncoderBlock& src) {
  EncoderBlock b;
  b.conv1 = clone_frozen(src.conv1);
  b.conv2 = clone_frozen(src.conv2);
  return b;
}

DepthwiseDown clone_frozen(const DepthwiseDown& src) {
  DepthwiseDown d = src;
  d.w = frozen_clone(src.w);
  d.b = frozen_clone(src.b);
  return d;
}

void check_volume_shapes(const Tensor& vol_tk, const Tensor& vol_t,
                         const Tensor& roi_t, const Tensor& roi_tk) {
  const Shape& s = vol_t.shape();
  if (vol_tk.shape() != s || roi_t.shape() != s || roi_tk.shape() != s)
    throw std::invalid_argument(
        "masked_mse_loss: volume/mask shapes must all match, got " +
        shape_to_string(vol_t.shape()) + ", " +
        shape_to_string(vol_tk.shape()) + ", " +
        shape_to_string(roi_t.shape()) + ", " +
        shape_to_string(roi_tk.shape()));
}

}  // namespace

Comparator make_comparator(const EncoderPrefix& encoder_prefix,
                           double momentum) {
  Comparator c;
  c.momentum = momentum;
  c.prefix.stem = clone_frozen(encoder_prefix.stem);
  for (std::size_t i = 0; i < 3; ++i)
    c.prefix.blocks[i] = clone_frozen(encoder_prefix.blocks[i]);
  for (std::size_t i = 0; i < 2; ++i)
    c.prefix.downs[i] = clone_frozen(encoder_prefix.downs[i]);
  return c;
}

void ema_update(Comparator& comparator, EncoderPrefix& encoder_prefix,
                double m) {
  if (!(m >= 0.0 && m < 1.0))
    throw std::invalid_argument("ema_update: momentum must be in [0,1)");
  std::vector<Parameter> ours, theirs;
  comparator.prefix.collect("prefix", ours);
  encoder_prefix.collect("prefix", theirs);
  if (ours.size() != theirs.size())
    throw std::invalid_argument("ema_update: comparator/encoder structure mismatch");
  for (std::size_t i = 0; i < ours.size(); ++i) {
    if (ours[i].name != theirs[i].name ||
        ours[i].tensor.shape() != theirs[i].tensor.shape())
      throw std::invalid_argument(
          "ema_update: parameter mismatch at " + ours[i].name + " vs " +
          theirs[i].name);
    auto w = ours[i].tensor.mutable_data();
    const auto e = theirs[i].tensor.data();
    for (std::size_t j = 0; j < w.size(); ++j)
      w[j] = m * w[j] + (1.0 - m) * e[j];
  }
}

Tensor masked_mse_loss(const Tensor& vol_tk, const Tensor& vol_t,
                       const Tensor& field_d, const Tensor& add_map,
                       const Tensor& roi_t, const Tensor& roi_tk,
                       double lambda1, double lambda2) {
  check_volume_shapes(vol_tk, vol_t, roi_t, roi_tk);
  if (add_map.shape() != vol_t.shape())
    throw std::invalid_argument("masked_mse_loss: additive map shape " +
                                shape_to_string(add_map.shape()) +
                                " must match volume " +
                                shape_to_string(vol_t.shape()));
  const double inv_omega = 1.0 / static_cast<double>(vol_t.numel());
  const Tensor warped_mask = warp_mask(roi_t, field_d);
  const Tensor target = mul(vol_tk, roi_tk);
  const Tensor recon = mul(apply_deformation(vol_t, field_d), warped_mask);
  const Tensor term1 =
      mul_scalar(sum_squares(sub(target, recon)), lambda1 * inv_omega);
  // U is the residual left for the additive map; the deformation path is
  // detached so term 2 moves only the additive map.
  const Tensor residual = sub(target, recon.detach());
  const Tensor term2 = mul_scalar(
      sum_squares(sub(residual, mul(add_map, warped_mask.detach()))),
      lambda2 * inv_omega);
  return add(term1, term2);
}

Tensor perceptual_loss(const Tensor& target_masked,
                       const Tensor& morphed_masked,
                       const Comparator& comparator) {
  const auto taps_target = comparator.prefix.taps(target_masked);
  const auto taps_morphed = comparator.prefix.taps(morphed_masked);
  Tensor acc;
  for (std::size_t j = 0; j < 3; ++j) {
    const double inv_elems = 1.0 / static_cast<double>(taps_target[j].numel());
    Tensor term = mul_scalar(
        sum_squares(sub(taps_target[j], taps_morphed[j])), inv_elems);
    acc = j == 0 ? term : add(acc, term);
  }
  return mul_scalar(acc, 1.0 / 3.0);
}

Tensor smoothness_loss(const Tensor& field) {
  if (field.rank() != 4)
    throw std::invalid_argument("smoothness_loss: field must be [C,H,W,D]");
  Tensor acc;
  for (int axis = 1; axis <= 3; ++axis) {
    Tensor term = sum_squares(forward_diff(field, axis));
    acc = axis == 1 ? term : add(acc, term);
  }
  return acc;
}

Tensor folding_loss(const Tensor& field) {
  if (field.rank() != 4 || field.dim(0) != 3)
    throw std::invalid_argument("folding_loss: field must be [3,H,W,D]");
  Tensor acc;
  for (int axis = 0; axis < 3; ++axis) {
    const Tensor deriv = forward_diff(narrow(field, axis, 1), axis + 1);
    const Tensor hinge = relu(neg(add_scalar(deriv, 1.0)));
    Tensor term = sum_squares(hinge);
    acc = axis == 0 ? term : add(acc, term);
  }
  return acc;
}

Tensor additive_sparsity_loss(const Tensor& add_map) {
  return l1_norm(add_map);
}

SslLossBreakdown total_ssl_loss(const SslPair& pair, const MorphModel& model,
                                const Comparator& comparator,
                                const LossWeights& weights) {
  const MorphPrediction pred = morph_predict(model, pair.vol_t, pair.vol_tk);
  SslLossBreakdown out;
  out.mse = masked_mse_loss(pair.vol_tk, pair.vol_t, pred.field_d, pred.field_a,
                            pair.roi_t, pair.roi_tk, weights.lambda1,
                            weights.lambda2);
  const Tensor target_masked = mul(pair.vol_tk, pair.roi_tk);
  const Tensor morphed_masked =
      mul(morph(pair.vol_t, pred.field_d, pred.field_a),
          warp_mask(pair.roi_t, pred.field_d));
  out.prc = mul_scalar(
      perceptual_loss(target_masked, morphed_masked, comparator),
      weights.lambda3);
  out.smt = mul_scalar(smoothness_loss(pred.field_d), weights.lambda4);
  out.fld = mul_scalar(folding_loss(pred.field_d), weights.lambda5);
  out.add = mul_scalar(additive_sparsity_loss(pred.field_a), weights.lambda6);
  out.total = add(add(add(add(out.mse, out.prc), out.smt), out.fld), out.add);
  return out;
}

}  // namespace morphtrack
