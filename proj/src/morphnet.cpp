#include "morphtrack/morphnet.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "morphtrack/warp.hpp"

namespace morphtrack {

void NetConfig::validate() const {
  if (h % 16 != 0 || w % 16 != 0)
    throw std::invalid_argument(
        "net: H and W must be divisible by 16 (four 2x downsamples), got " +
        shape_to_string({h, w, d}));
  if (d % 2 != 0)
    throw std::invalid_argument(
        "net: D must be divisible by 2 (final downsample halves depth), got " +
        shape_to_string({h, w, d}));
  if (stem_channels < 4 || stem_channels % 4 != 0)
    throw std::invalid_argument("net: stem_channels must be a multiple of 4");
  if (feature_channels < 1)
    throw std::invalid_argument("net: feature_channels must be >= 1");
  if (ln_eps <= 0.0) throw std::invalid_argument("net: ln_eps must be > 0");
}

int NetConfig::block_channels(int block_index) const {
  return stem_channels << (block_index + 1);
}

std::array<int, 3> NetConfig::feature_grid() const {
  return {h / 16, w / 16, d / 2};
}

// ---------------------------------------------------------------------------
// Oriented filter banks
// ---------------------------------------------------------------------------

namespace {

Tensor conv_weight(int c_out, int c_in, int kh, int kw, int kd, Rng& rng) {
  const double fan_in = static_cast<double>(c_in) * kh * kw * kd;
  return Tensor::randn(Shape{c_out, c_in, kh, kw, kd}, rng,
                       std::sqrt(2.0 / fan_in), true);
}

Tensor conv_bias(int c_out) { return Tensor::zeros(Shape{c_out}, true); }

void push(std::vector<Parameter>& out, const std::string& name, Tensor t,
          bool constrained = false) {
  out.push_back(Parameter{name, std::move(t), constrained});
}

}  // namespace

OrientedConv make_oriented_conv(int c_in, int c_out, Rng& rng) {
  OrientedConv oc;
  oc.c_in = c_in;
  oc.c_out = c_out;
  const int quarter = c_out / 4;
  const int n_ip = c_out - 2 * quarter;
  // Draw order is fixed: in-plane, en-face, cross, weights before biases.
  oc.w_ip = conv_weight(n_ip, c_in, 3, 3, 1, rng);
  oc.b_ip = conv_bias(n_ip);
  if (quarter > 0) {
    oc.w_ef = conv_weight(quarter, c_in, 1, 3, 3, rng);
    oc.b_ef = conv_bias(quarter);
    oc.w_cr = conv_weight(quarter, c_in, 3, 1, 3, rng);
    oc.b_cr = conv_bias(quarter);
  }
  return oc;
}

Tensor OrientedConv::forward(const Tensor& x) const {
  if (x.dim(0) != c_in)
    throw std::invalid_argument("oriented_conv: channel axis mismatch: got " +
                                std::to_string(x.dim(0)) + ", expected " +
                                std::to_string(c_in));
  std::vector<Tensor> parts;
  parts.push_back(conv3d(x, w_ip, b_ip));
  if (w_ef.defined()) {
    parts.push_back(conv3d(x, w_ef, b_ef));
    parts.push_back(conv3d(x, w_cr, b_cr));
  }
  return parts.size() == 1 ? parts[0] : concat(parts);
}

void OrientedConv::collect(const std::string& prefix,
                           std::vector<Parameter>& out) {
  push(out, prefix + ".w_ip", w_ip);
  push(out, prefix + ".b_ip", b_ip);
  if (w_ef.defined()) {
    push(out, prefix + ".w_ef", w_ef);
    push(out, prefix + ".b_ef", b_ef);
    push(out, prefix + ".w_cr", w_cr);
    push(out, prefix + ".b_cr", b_cr);
  }
}

S3DConv make_s3dconv(int channels, double ln_eps, Rng& rng) {
  if (channels % 4 != 0)
    throw std::invalid_argument(
        "s3dconv: channels must be divisible by 4 (got " +
        std::to_string(channels) + ")");
  return detail_net::make_s3dconv_any(channels, channels, ln_eps, rng);
}

namespace detail_net {

S3DConv make_s3dconv_any(int c_in, int c_out, double ln_eps, Rng& rng) {
  S3DConv s;
  s.ln_eps = ln_eps;
  s.ln_gain = Tensor::full(Shape{c_in}, 1.0, true);
  s.ln_bias = Tensor::zeros(Shape{c_in}, true);
  s.conv = make_oriented_conv(c_in, c_out, rng);
  return s;
}

}  // namespace detail_net

Tensor S3DConv::forward(const Tensor& x) const {
  return conv.forward(
      elu(scale_channels(layer_norm(x, ln_eps), ln_gain, ln_bias)));
}

void S3DConv::collect(const std::string& prefix, std::vector<Parameter>& out) {
  push(out, prefix + ".ln_gain", ln_gain);
  push(out, prefix + ".ln_bias", ln_bias);
  conv.collect(prefix + ".conv", out);
}

EncoderBlock make_encoder_block(int channels, double ln_eps, Rng& rng) {
  EncoderBlock b;
  b.conv1 = make_s3dconv(channels, ln_eps, rng);
  b.conv2 = make_s3dconv(channels, ln_eps, rng);
  return b;
}

Tensor EncoderBlock::forward(const Tensor& x) const {
  return concat({x, conv2.forward(conv1.forward(x))});
}

void EncoderBlock::collect(const std::string& prefix,
                           std::vector<Parameter>& out) {
  conv1.collect(prefix + ".conv1", out);
  conv2.collect(prefix + ".conv2", out);
}

DepthwiseDown make_depthwise_down(int channels, Stride3 stride, Rng& rng) {
  DepthwiseDown dn;
  dn.stride = stride;
  dn.w = conv_weight(channels, 1, 3, 3, 3, rng);
  dn.b = conv_bias(channels);
  return dn;
}

Tensor DepthwiseDown::forward(const Tensor& x) const {
  return conv3d(x, w, b, stride, x.dim(0));
}

void DepthwiseDown::collect(const std::string& prefix,
                            std::vector<Parameter>& out) {
  push(out, prefix + ".w", w);
  push(out, prefix + ".b", b);
}

Pathway make_pathway(int c_in, int c_mid, int c_out, double ln_eps, Rng& rng) {
  Pathway p;
  p.ln_eps = ln_eps;
  p.ln1_gain = Tensor::full(Shape{c_in}, 1.0, true);
  p.ln1_bias = Tensor::zeros(Shape{c_in}, true);
  p.w1 = conv_weight(c_mid, c_in, 1, 1, 1, rng);
  p.b1 = conv_bias(c_mid);
  p.ln2_gain = Tensor::full(Shape{c_mid}, 1.0, true);
  p.ln2_bias = Tensor::zeros(Shape{c_mid}, true);
  p.w2 = conv_weight(c_out, c_mid, 1, 1, 1, rng);
  p.b2 = conv_bias(c_out);
  return p;
}

Tensor Pathway::forward(const Tensor& x) const {
  Tensor h = conv3d(
      elu(scale_channels(layer_norm(x, ln_eps), ln1_gain, ln1_bias)), w1, b1);
  return conv3d(
      elu(scale_channels(layer_norm(h, ln_eps), ln2_gain, ln2_bias)), w2, b2);
}

void Pathway::collect(const std::string& prefix, std::vector<Parameter>& out) {
  push(out, prefix + ".ln1_gain", ln1_gain);
  push(out, prefix + ".ln1_bias", ln1_bias);
  push(out, prefix + ".w1", w1);
  push(out, prefix + ".b1", b1);
  push(out, prefix + ".ln2_gain", ln2_gain);
  push(out, prefix + ".ln2_bias", ln2_bias);
  push(out, prefix + ".w2", w2);
  push(out, prefix + ".b2", b2);
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

std::array<Tensor, 3> EncoderPrefix::taps(const Tensor& vol) const {
  std::array<Tensor, 3> t;
  t[0] = blocks[0].forward(stem.forward(vol));
  t[1] = blocks[1].forward(downs[0].forward(t[0]));
  t[2] = blocks[2].forward(downs[1].forward(t[1]));
  return t;
}

void EncoderPrefix::collect(const std::string& prefix,
                            std::vector<Parameter>& out) {
  stem.collect(prefix + ".stem", out);
  blocks[0].collect(prefix + ".block1", out);
  downs[0].collect(prefix + ".down1", out);
  blocks[1].collect(prefix + ".block2", out);
  downs[1].collect(prefix + ".down2", out);
  blocks[2].collect(prefix + ".block3", out);
}

Encoder make_encoder(const NetConfig& cfg, Rng& rng) {
  cfg.validate();
  Encoder e;
  e.cfg = cfg;
  e.prefix.stem = make_oriented_conv(1, cfg.stem_channels, rng);
  const Stride3 halve{2, 2, 1};
  const Stride3 halve_all{2, 2, 2};
  // Blocks double the width; each downsample keeps it.
  e.prefix.blocks[0] = make_encoder_block(cfg.stem_channels, cfg.ln_eps, rng);
  e.prefix.downs[0] =
      make_depthwise_down(cfg.block_channels(0), halve, rng);
  e.prefix.blocks[1] =
      make_encoder_block(cfg.block_channels(0), cfg.ln_eps, rng);
  e.prefix.downs[1] =
      make_depthwise_down(cfg.block_channels(1), halve, rng);
  e.prefix.blocks[2] =
      make_encoder_block(cfg.block_channels(1), cfg.ln_eps, rng);
  e.downs_tail[0] = make_depthwise_down(cfg.block_channels(2), halve, rng);
  e.blocks_tail[0] =
      make_encoder_block(cfg.block_channels(2), cfg.ln_eps, rng);
  // Depth is halved only here, for a roughly isotropic receptive field.
  e.downs_tail[1] = make_depthwise_down(cfg.block_channels(3), halve_all, rng);
  e.blocks_tail[1] =
      make_encoder_block(cfg.block_channels(3), cfg.ln_eps, rng);
  const int trunk_c = cfg.block_channels(4);
  e.path_d =
      make_pathway(trunk_c, trunk_c / 2, cfg.feature_channels, cfg.ln_eps, rng);
  e.path_a =
      make_pathway(trunk_c, trunk_c / 2, cfg.feature_channels, cfg.ln_eps, rng);
  return e;
}

Tensor Encoder::trunk(const Tensor& vol) const {
  if (vol.shape() != Shape{1, cfg.h, cfg.w, cfg.d})
    throw std::invalid_argument(
        "encoder: input shape " + shape_to_string(vol.shape()) +
        " does not match configured " +
        shape_to_string({1, cfg.h, cfg.w, cfg.d}));
  const auto t = prefix.taps(vol);
  Tensor x = blocks_tail[0].forward(downs_tail[0].forward(t[2]));
  return blocks_tail[1].forward(downs_tail[1].forward(x));
}

FeatureMap Encoder::forward(const Tensor& vol) const {
  const Tensor x5 = trunk(vol);
  return FeatureMap{path_d.forward(x5), path_a.forward(x5)};
}

void Encoder::collect(const std::string& prefix_name,
                      std::vector<Parameter>& out) {
  prefix.collect(prefix_name, out);
  downs_tail[0].collect(prefix_name + ".down3", out);
  blocks_tail[0].collect(prefix_name + ".block4", out);
  downs_tail[1].collect(prefix_name + ".down4", out);
  blocks_tail[1].collect(prefix_name + ".block5", out);
  path_d.collect(prefix_name + ".path_d", out);
  path_a.collect(prefix_name + ".path_a", out);
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

Tensor DecoderBlock::forward(const Tensor& x) const {
  Tensor up = trilinear_resize(x, depth_scale);
  Tensor compressed = conv3d(up, comp_w, comp_b, Stride3{}, comp_groups);
  return concat({compressed, s3d.forward(compressed)});
}

void DecoderBlock::collect(const std::string& prefix,
                           std::vector<Parameter>& out) {
  push(out, prefix + ".comp_w", comp_w);
  push(out, prefix + ".comp_b", comp_b);
  s3d.collect(prefix + ".s3d", out);
}

DecoderNet make_decoder(const NetConfig& cfg, int out_channels, Rng& rng) {
  DecoderNet net;
  net.out_channels = out_channels;
  net.ln_eps = cfg.ln_eps;
  int c = cfg.feature_channels;
  for (int i = 0; i < 4; ++i) {
    DecoderBlock& b = net.blocks[static_cast<std::size_t>(i)];
    b.depth_scale = (i == 0) ? 2 : 1;
    b.comp_groups = std::max(1, c / 4);
    const int group_size = c / b.comp_groups;
    b.comp_w = conv_weight(b.comp_groups, group_size, 3, 3, 3, rng);
    b.comp_b = conv_bias(b.comp_groups);
    b.s3d = detail_net::make_s3dconv_any(b.comp_groups, b.comp_groups,
                                         cfg.ln_eps, rng);
    c = 2 * b.comp_groups;  // concat of compression and its S3DConv
  }
  net.ln_gain = Tensor::full(Shape{c}, 1.0, true);
  net.ln_bias = Tensor::zeros(Shape{c}, true);
  net.w_final = conv_weight(out_channels, c, 1, 1, 1, rng);
  net.b_final = conv_bias(out_channels);
  return net;
}

Tensor DecoderNet::forward_raw(const Tensor& x) const {
  Tensor h = x;
  for (const DecoderBlock& b : blocks) h = b.forward(h);
  h = elu(scale_channels(layer_norm(h, ln_eps), ln_gain, ln_bias));
  return conv3d(h, w_final, b_final);
}

void DecoderNet::collect(const std::string& prefix,
                         std::vector<Parameter>& out) {
  for (std::size_t i = 0; i < blocks.size(); ++i)
    blocks[i].collect(prefix + ".block" + std::to_string(i + 1), out);
  push(out, prefix + ".ln_gain", ln_gain);
  push(out, prefix + ".ln_bias", ln_bias);
  push(out, prefix + ".w_final", w_final);
  push(out, prefix + ".b_final", b_final);
}

DecoderScales make_decoder_scales() {
  // softplus(0.5413) ~ 1.0: direction gains and magnitude ratios start at
  // order unity so the fields act at a useful scale from the first steps.
  DecoderScales s;
  s.gamma_dir_d = Tensor::scalar(0.5413248546129181, true);
  s.alpha_mag_d = Tensor::scalar(0.5413248546129181, true);
  s.gamma_dir_a = Tensor::scalar(0.5413248546129181, true);
  s.alpha_mag_a = Tensor::scalar(0.5413248546129181, true);
  return s;
}

void DecoderScales::collect(const std::string& prefix,
                            std::vector<Parameter>& out) {
  push(out, prefix + ".gamma_dir_d", gamma_dir_d, true);
  push(out, prefix + ".alpha_mag_d", alpha_mag_d, true);
  push(out, prefix + ".gamma_dir_a", gamma_dir_a, true);
  push(out, prefix + ".alpha_mag_a", alpha_mag_a, true);
}

Tensor decoder_forward(const DecoderNet& net, const Tensor& v,
                       const Tensor& gamma_raw, const Tensor& alpha_raw) {
  if (v.rank() != 4)
    throw std::invalid_argument("decoder: feature displacement must be rank 4");
  const Shape out_shape{net.out_channels, 16 * v.dim(1), 16 * v.dim(2),
                        2 * v.dim(3)};
  const Tensor norm_v = l2_norm(v);
  if (norm_v.value() < 1e-12) return Tensor::zeros(out_shape);

  const Tensor direction_in = mul(v, div(softplus(gamma_raw), norm_v));
  const Tensor raw = net.forward_raw(direction_in);
  const Tensor norm_raw = l2_norm(raw);
  if (norm_raw.value() == 0.0) {
    std::fprintf(stderr,
                 "morphtrack: decoder produced a zero raw field for a nonzero "
                 "displacement; emitting zero field\n");
    return Tensor::zeros(out_shape);
  }
  return mul(raw, div(mul(softplus(alpha_raw), norm_v), norm_raw));
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

MorphModel make_morph_model(const NetConfig& cfg, Rng& rng) {
  MorphModel m;
  m.cfg = cfg;
  m.encoder = make_encoder(cfg, rng);
  m.decoder_d = make_decoder(cfg, 3, rng);
  m.decoder_a = make_decoder(cfg, 1, rng);
  m.scales = make_decoder_scales();
  return m;
}

std::vector<Parameter> MorphModel::parameters() {
  std::vector<Parameter> out;
  encoder.collect("encoder", out);
  decoder_d.collect("decoder_d", out);
  decoder_a.collect("decoder_a", out);
  scales.collect("scales", out);
  return out;
}

std::vector<Parameter> MorphModel::encoder_parameters() {
  std::vector<Parameter> out;
  encoder.collect("encoder", out);
  return out;
}

TransformFields predict_transform(const MorphModel& model,
                                  const FeatureMap& from,
                                  const FeatureMap& to) {
  const Tensor v_d = sub(to.fd, from.fd);
  const Tensor v_a = sub(to.fa, from.fa);
  return TransformFields{
      decoder_forward(model.decoder_d, v_d, model.scales.gamma_dir_d,
                      model.scales.alpha_mag_d),
      decoder_forward(model.decoder_a, v_a, model.scales.gamma_dir_a,
                      model.scales.alpha_mag_a)};
}

MorphPrediction morph_predict(const MorphModel& model, const Tensor& vol_t,
                              const Tensor& vol_tk) {
  if (vol_t.shape() != vol_tk.shape())
    throw std::invalid_argument("morph_predict: volume shapes differ");
  MorphPrediction p;
  p.f_t = model.encoder.forward(vol_t);
  p.f_tk = model.encoder.forward(vol_tk);
  const TransformFields f = predict_transform(model, p.f_t, p.f_tk);
  p.field_d = f.field_d;
  p.field_a = f.field_a;
  return p;
}

FeatureMap interpolate_features(const FeatureMap& f_t, const FeatureMap& f_tk,
                                double rho) {
  if (!(rho >= 0.0 && rho <= 1.0))
    throw std::invalid_argument("interpolate_features: rho must be in [0,1]");
  if (rho == 0.0) return f_t;
  if (rho == 1.0) return f_tk;
  return FeatureMap{add(f_t.fd, mul_scalar(sub(f_tk.fd, f_t.fd), rho)),
                    add(f_t.fa, mul_scalar(sub(f_tk.fa, f_t.fa), rho))};
}

Tensor generate_intermediate(const MorphModel& model, const Tensor& vol_t,
                             const FeatureMap& f_t, const FeatureMap& f_rho) {
  const TransformFields f = predict_transform(model, f_t, f_rho);
  return morph(vol_t, f.field_d, f.field_a);
}

}  // namespace morphtrack
