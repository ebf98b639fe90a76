#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "morphtrack/rng.hpp"
#include "morphtrack/tensor.hpp"

namespace morphtrack {

/// Synthetic longitudinal retina-like volumes: smooth horizontal layer bands
/// inside a flat ROI slab, growing Gaussian lesion bumps, a bounded smooth
/// per-visit deformation, and additive noise. Conversion happens when the
/// total lesion load crosses a threshold.
struct PhantomConfig {
  int h = 48, w = 48, d = 8;
  int eyes = 30;
  int ssl_eyes = 10;             // remainder is the labelled TTC set
  double ssl_val_fraction = 0.2; // of the SSL eyes
  int folds = 5;

  int min_visits = 5, max_visits = 8;
  double mean_visit_interval = 3.6;  // months
  double visit_interval_jitter = 1.2;
  double min_visit_interval = 1.0;

  double noise_sigma = 0.01;
  double texture_amplitude = 0.04;
  int texture_modes = 6;

  double deform_amplitude = 0.12;  // voxels; axis derivatives stay > -0.5
  int deform_modes = 3;

  int lesions_min = 2, lesions_max = 4;
  double conversion_threshold = 9.0;  // on total lesion load
  double converter_fraction = 0.65;    // eyes converting within observation
  double growth_scale = 1.0;           // 0 disables lesion growth entirely

  int roi_top = 10, roi_bottom = 38;  // inclusive row band
  double pair_window_months = 24.0;
  double horizon_months = 18.0;

  void validate() const;
};

struct LesionParams {
  double ch, cw, cd;  // center, voxels
  double sh, sw, sd;  // widths, voxels
  double rate;        // amplitude per month
};

struct Visit {
  double t_months = 0.0;
  Tensor volume, roi;
  bool converted = false;
  double t_minus = 0.0, t_plus = 0.0;  // months relative to this scan
};

struct EyeSeries {
  std::string eye_id;
  std::vector<Visit> visits;
  double conversion_time_true = 0.0;  // months from first visit; +inf possible
  std::vector<LesionParams> lesions;
  std::string split;  // ssl_train | ssl_val | ttc
  int fold = -1;      // only for ttc eyes
};

struct PhantomDataset {
  PhantomConfig cfg;
  std::uint64_t seed = 0;
  std::vector<EyeSeries> eyes;
};

EyeSeries generate_eye_series(const PhantomConfig& cfg, Rng& rng,
                              const std::string& eye_id);

/// Full dataset: eyes, SSL/TTC split, stratified fold assignment. Pure in
/// (seed, cfg).
PhantomDataset generate_dataset(const PhantomConfig& cfg, std::uint64_t seed);

void write_dataset(const PhantomDataset& ds, const std::filesystem::path& dir);
PhantomDataset load_dataset(const std::filesystem::path& dir);

/// Ordered visit pairs (i,j), i<j, within the pairing window.
std::vector<std::pair<int, int>> eligible_pairs(const EyeSeries& eye,
                                                double window_months);

/// Uniform draw over eligible ordered pairs; throws when none exist.
std::pair<int, int> sample_ssl_pair(const EyeSeries& eye, Rng& rng,
                                    double window_months);

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
  double max_translate_frac = 0.15;
  double flip_prob = 0.5;
  // Blur strength in voxels; the default matches a 0.9-voxel blur on a
  // 192-wide grid, rescaled to the 4x coarser default phantom resolution.
  double blur_sigma_max = 0.225;
  double noise_sigma = 0.001;
};

/// Geometry shared by both members of an SSL pair.
struct SharedAugment {
  int dh = 0, dw = 0, dd = 0;
  bool flip = false;
};

SharedAugment draw_shared_augment(Rng& rng, const Shape& vol_shape,
                                  double max_translate_frac, double flip_prob);

/// Integer translation (volume filled with -1, ROI with 0) plus optional
/// horizontal flip, applied identically to volume and ROI.
void apply_shared_augment(Tensor& vol, Tensor& roi, const SharedAugment& aug);

/// Separable Gaussian blur, border-renormalized taps; sigma 0 is identity.
Tensor gaussian_blur(const Tensor& vol, double sigma);

/// Per-member photometric part: random blur sigma, then voxel noise.
void apply_photometric(Tensor& vol, Rng& rng, const AugmentConfig& cfg);

/// Single-scan pipeline (shared geometry + photometric).
void augment_single(Tensor& vol, Tensor& roi, Rng& rng,
                    const AugmentConfig& cfg);

/// Pair pipeline: one shared geometric draw applied to both members, then
/// independent photometric draws.
void augment_pair(Tensor& vol_a, Tensor& roi_a, Tensor& vol_b, Tensor& roi_b,
                  Rng& rng, const AugmentConfig& cfg);

}  // namespace morphtrack
