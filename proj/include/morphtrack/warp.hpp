#pragma once

#include "morphtrack/tensor.hpp"

namespace morphtrack {

/// Trilinear resampling of a single-channel volume [1,H,W,D] at p + field(p),
/// field [3,H,W,D] in voxel units. Source coordinates are clamped to the
/// volume border. Differentiable w.r.t. both the volume and the field;
/// clamped coordinates contribute zero field gradient. Throws on NaN in the
/// field (diverged training) and on shape mismatch.
Tensor apply_deformation(const Tensor& vol, const Tensor& field);

/// apply_deformation(vol, field) + add_map.
Tensor morph(const Tensor& vol, const Tensor& field, const Tensor& add_map);

/// Warps a binary ROI mask; the result is soft in [0,1] (no re-binarization)
/// and multiplies the losses. Throws if the mask is not {0,1}-valued.
Tensor warp_mask(const Tensor& mask, const Tensor& field);

/// Plain (non-differentiable) trilinear resize of [C,H,W,D] to an arbitrary
/// grid, align-corners false. Used to bring ROI masks onto feature grids.
Tensor resample_to(const Tensor& vol, int th, int tw, int td);

}  // namespace morphtrack
