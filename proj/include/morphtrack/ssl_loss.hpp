#pragma once

#include "morphtrack/morphnet.hpp"
#include "morphtrack/tensor.hpp"

namespace morphtrack {

struct LossWeights {
  double lambda1 = 10.0;   // deformed-image MSE
  double lambda2 = 100.0;  // additive-residual MSE
  double lambda3 = 10.0;   // perceptual
  double lambda4 = 0.1;    // smoothness
  double lambda5 = 1e6;    // anti-folding
  double lambda6 = 1e-5;   // additive-map sparsity
};

/// Frozen copy of the encoder prefix used for the perceptual loss. Its
/// weights never receive gradients; they track the encoder by exponential
/// moving average.
struct Comparator {
  EncoderPrefix prefix;
  double momentum = 0.99;
};

Comparator make_comparator(const EncoderPrefix& encoder_prefix,
                           double momentum);

/// w <- m*w + (1-m)*w_enc elementwise over the prefix parameters.
/// Throws on structural mismatch.
void ema_update(Comparator& comparator, EncoderPrefix& encoder_prefix,
                double m);

/// Two-term masked reconstruction MSE. Term 1 fits the spatial deformation
/// against the masked target; term 2 fits the additive map to the residual
/// U computed with the deformation path detached, so the additive map never
/// shortcuts the deformation. Gradients reach the field only through term 1
/// and the additive map only through term 2.
Tensor masked_mse_loss(const Tensor& vol_tk, const Tensor& vol_t,
                       const Tensor& field_d, const Tensor& add_map,
                       const Tensor& roi_t, const Tensor& roi_tk,
                       double lambda1, double lambda2);

/// Mean over the comparator's three taps of per-element squared feature
/// distance between the masked target and the masked morph output.
Tensor perceptual_loss(const Tensor& target_masked, const Tensor& morphed_masked,
                       const Comparator& comparator);

/// Sum of squared forward differences of the field over all spatial axes
/// and channels (boundary differences are zero).
Tensor smoothness_loss(const Tensor& field);

/// Squared hinge on the diagonal Jacobian terms: sum over voxels and axes of
/// max(0, -(1 + dD_i/dx_i))^2. Zero whenever every axis derivative exceeds -1.
Tensor folding_loss(const Tensor& field);

/// Plain L1 sum of the additive map (not a mean). Subgradient 0 at zero.
Tensor additive_sparsity_loss(const Tensor& add_map);

struct SslPair {
  Tensor vol_t, vol_tk, roi_t, roi_tk;
};

/// Weighted contributions; total is their left-to-right sum, so re-adding
/// the logged terms reproduces it bit-exactly.
struct SslLossBreakdown {
  Tensor mse, prc, smt, fld, add, total;
};

SslLossBreakdown total_ssl_loss(const SslPair& pair, const MorphModel& model,
                                const Comparator& comparator,
                                const LossWeights& weights);

}  // namespace morphtrack
