#pragma once

#include <array>
#include <string>
#include <vector>

#include "morphtrack/ops.hpp"
#include "morphtrack/tensor.hpp"

namespace morphtrack {

/// Named trainable tensor. Constrained parameters are stored unconstrained
/// and exposed through softplus, guaranteeing positive effective values.
struct Parameter {
  std::string name;
  Tensor tensor;
  bool softplus_constrained = false;
  Tensor effective() const {
    return softplus_constrained ? softplus(tensor) : tensor;
  }
};

struct NetConfig {
  int h = 48, w = 48, d = 8;
  int stem_channels = 4;      // block widths double from here: 2x per block
  int feature_channels = 16;  // per subspace (F_D and F_A each)
  double ln_eps = 1e-5;

  void validate() const;
  int block_channels(int block_index) const;  // output width of block i (0-based)
  std::array<int, 3> feature_grid() const;    // (h/16, w/16, d/2)
};

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

/// Bank of 2D filters in the three orthogonal planes: n_ip of 3x3x1 acting
/// within a B-scan, n_ef of 1x3x3 and n_cr of 3x1x3 across B-scans. When
/// c_out is divisible by 4 the split is (2P,P,P) with P=c_out/4, i.e. 50%
/// in-plane; smaller widths fall back to in-plane filters.
struct OrientedConv {
  int c_in = 0, c_out = 0;
  Tensor w_ip, b_ip, w_ef, b_ef, w_cr, b_cr;  // unused orientations undefined
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<Parameter>& out);
};

OrientedConv make_oriented_conv(int c_in, int c_out, Rng& rng);

/// Pre-activated separable block: layer_norm -> ELU -> oriented filter bank.
struct S3DConv {
  double ln_eps = 1e-5;
  Tensor ln_gain, ln_bias;
  OrientedConv conv;
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<Parameter>& out);
};

/// Channel-preserving S3DConv; requires channels divisible by 4.
S3DConv make_s3dconv(int channels, double ln_eps, Rng& rng);

namespace detail_net {
// Generalized widths for the narrow decoder tail where C < 4.
S3DConv make_s3dconv_any(int c_in, int c_out, double ln_eps, Rng& rng);
}  // namespace detail_net

/// Two S3DConvs plus concatenation skip: [C,...] -> [2C,...], the first C
/// output channels being the (un-activated) input itself.
struct EncoderBlock {
  S3DConv conv1, conv2;
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<Parameter>& out);
};

EncoderBlock make_encoder_block(int channels, double ln_eps, Rng& rng);

/// Strided depthwise 3x3x3 downsampling (one filter per channel).
struct DepthwiseDown {
  Stride3 stride;
  Tensor w, b;
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<Parameter>& out);
};

DepthwiseDown make_depthwise_down(int channels, Stride3 stride, Rng& rng);

/// Two pre-activated 1x1x1 convolutions projecting the trunk output into one
/// feature subspace.
struct Pathway {
  double ln_eps = 1e-5;
  Tensor ln1_gain, ln1_bias, w1, b1;
  Tensor ln2_gain, ln2_bias, w2, b2;
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<Parameter>& out);
};

Pathway make_pathway(int c_in, int c_mid, int c_out, double ln_eps, Rng& rng);

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

/// Stem plus the first three encoder blocks (with their interleaved
/// downsamples). This prefix doubles as the perceptual comparator, whose
/// taps are the three block outputs.
struct EncoderPrefix {
  OrientedConv stem;
  std::array<EncoderBlock, 3> blocks;
  std::array<DepthwiseDown, 2> downs;
  std::array<Tensor, 3> taps(const Tensor& vol) const;
  void collect(const std::string& prefix, std::vector<Parameter>& out);
};

struct FeatureMap {
  Tensor fd, fa;
};

struct Encoder {
  NetConfig cfg;
  EncoderPrefix prefix;
  std::array<DepthwiseDown, 2> downs_tail;  // before blocks 4 and 5
  std::array<EncoderBlock, 2> blocks_tail;
  Pathway path_d, path_a;
  Tensor trunk(const Tensor& vol) const;  // output of block 5
  FeatureMap forward(const Tensor& vol) const;
  void collect(const std::string& prefix, std::vector<Parameter>& out);
};

Encoder make_encoder(const NetConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

/// Upsampling block: trilinear x(2,2,s), grouped 4->1 channel compression,
/// S3DConv, concatenation skip. Maps C@(h,w,d) to C/2@(2h,2w,s*d) for C>=4.
struct DecoderBlock {
  int depth_scale = 1;
  int comp_groups = 1;
  Tensor comp_w, comp_b;
  S3DConv s3d;
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<Parameter>& out);
};

struct DecoderNet {
  int out_channels = 3;
  double ln_eps = 1e-5;
  std::array<DecoderBlock, 4> blocks;
  Tensor ln_gain, ln_bias, w_final, b_final;
  Tensor forward_raw(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<Parameter>& out);
};

DecoderNet make_decoder(const NetConfig& cfg, int out_channels, Rng& rng);

/// Positive learnable scalars of the direction/magnitude factorization
/// (direction gains and magnitude ratios for each decoder head).
struct DecoderScales {
  Tensor gamma_dir_d, alpha_mag_d, gamma_dir_a, alpha_mag_a;
  void collect(const std::string& prefix, std::vector<Parameter>& out);
};

DecoderScales make_decoder_scales();

/// Direction/magnitude-factored decoding: the head sees only the direction
/// gamma*V/||V||, and its raw output is rescaled so ||field|| equals
/// alpha*||V|| exactly. ||V|| below 1e-12 bypasses to a zero field.
Tensor decoder_forward(const DecoderNet& net, const Tensor& v,
                       const Tensor& gamma_raw, const Tensor& alpha_raw);

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

struct MorphModel {
  NetConfig cfg;
  Encoder encoder;
  DecoderNet decoder_d, decoder_a;
  DecoderScales scales;
  std::vector<Parameter> parameters();
  std::vector<Parameter> encoder_parameters();
};

MorphModel make_morph_model(const NetConfig& cfg, Rng& rng);

struct MorphPrediction {
  Tensor field_d, field_a;
  FeatureMap f_t, f_tk;
};

/// Encodes both volumes, decodes the feature displacement into the
/// deformation field and additive map that morph vol_t toward vol_tk.
MorphPrediction morph_predict(const MorphModel& model, const Tensor& vol_t,
                              const Tensor& vol_tk);

/// Fields predicted from an explicit feature displacement (to - from).
struct TransformFields {
  Tensor field_d, field_a;
};
TransformFields predict_transform(const MorphModel& model,
                                  const FeatureMap& from, const FeatureMap& to);

/// F_t + rho*(F_tk - F_t), per subspace; endpoints are returned exactly.
FeatureMap interpolate_features(const FeatureMap& f_t, const FeatureMap& f_tk,
                                double rho);

/// Morphs vol_t by the transform decoded from (f_rho - f_t).
Tensor generate_intermediate(const MorphModel& model, const Tensor& vol_t,
                             const FeatureMap& f_t, const FeatureMap& f_rho);

}  // namespace morphtrack
