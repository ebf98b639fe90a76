#pragma once

#include <string>

#include "morphtrack/morphnet.hpp"
#include "morphtrack/tensor.hpp"

namespace morphtrack {

/// Three 1x1x1 convolutions mapping the concatenated feature map to a
/// positive single-channel saliency map, plus the positive scalar weights
/// scaling its pooled value (time estimate) and spatial entropy (slope).
struct ClassifierNet {
  int in_channels = 0;
  Tensor w1, b1, w2, b2, w3, b3;
  Tensor time_scale_raw, slope_scale_raw;  // softplus-constrained scalars
  std::vector<Parameter> parameters();
};

ClassifierNet make_classifier(int in_channels, Rng& rng);

struct ClassifierOutput {
  Tensor saliency;  // M > 0, [1,h,w,d]
  Tensor slope_a;   // scalar in (0,1)
  Tensor time_b;    // scalar > 0, horizon-normalized conversion-time estimate
};

/// Forward pass; throws on non-finite features.
ClassifierOutput classifier_forward(const ClassifierNet& net, const Tensor& f);

/// Entropy of the map normalized to sum 1 (0*log(0) := 0); invariant to
/// positive rescaling of the map. Used for the slope parameter.
Tensor spatial_entropy(const Tensor& positive_map);

struct CdfParams {
  double a = 0.5;  // slope control in (0,1)
  double b = 1.0;  // conversion-time estimate, > 0
};

CdfParams to_params(const ClassifierOutput& out);

/// p = 1 / (1 + exp(-(t - b)/(a + 0.05))), monotone non-decreasing in t.
double cdf_probability(const CdfParams& params, double t);
Tensor cdf_probability(const Tensor& slope_a, const Tensor& time_b, double t);

/// r = 2 / (1 + exp(b/(a + 0.05))), in (0,1), decreasing in b.
double risk_score(const CdfParams& params);

enum class RiskGroup { Low, Moderate, High };

/// low: r in [0,0.33]; moderate: (0.33,0.67]; high: (0.67,1].
RiskGroup risk_group(double r);
const char* risk_group_name(RiskGroup g);

/// Interval-censored conversion label, in months relative to the scan.
/// t_minus is the last visit known unconverted, t_plus the first known
/// converted; +inf when never observed. t_minus is negative only for scans
/// taken at the first converted visit (t_plus == 0), where the previous
/// visit lies in the past.
struct ConversionRecord {
  std::string scan_id, eye_id;
  double t_minus = 0.0;
  double t_plus = 0.0;
  double horizon = 18.0;
};

enum class RecordCase {
  WithinHorizon,    // both anchors inside [0,1] after normalization
  BeyondHorizon,    // both anchors beyond the horizon
  ConvertedAtScan,  // t_plus == 0
};

/// Classifies a record into its loss case; throws on records matching none
/// (these must be rejected at ingestion).
RecordCase record_case(const ConversionRecord& rec);

/// True when conversion straddles the horizon (t_minus inside, t_plus
/// beyond): status at the horizon is unknown and the record is excluded.
bool record_straddles_horizon(const ConversionRecord& rec);

/// Average of two clamped binary cross entropies at the case's anchor times.
Tensor classification_loss(const Tensor& slope_a, const Tensor& time_b,
                           const ConversionRecord& rec);

/// Weighted contributions; total is their left-to-right sum.
struct TtcLossBreakdown {
  Tensor cls, slope_reg, mask_reg, total;
};

/// classification + 0.1*a^2 + 0.1*||M .* (1 - roi_on_grid)||_1.
TtcLossBreakdown ttc_total_loss(const ClassifierOutput& out,
                                const ConversionRecord& rec,
                                const Tensor& roi_on_grid);

}  // namespace morphtrack
