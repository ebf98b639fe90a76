#include "morphtrack/ttc.hpp"

#include <cmath>
#include <stdexcept>

namespace morphtrack {

namespace {

Tensor conv1x1_weight(int c_out, int c_in, Rng& rng) {
  return Tensor::randn(Shape{c_out, c_in, 1, 1, 1}, rng,
                       std::sqrt(2.0 / c_in), true);
}

constexpr double kBceClamp = 1e-7;
constexpr double kSlopeFloor = 0.05;  // denominator offset of the CDF

}  // namespace

ClassifierNet make_classifier(int in_channels, Rng& rng) {
  if (in_channels < 4)
    throw std::invalid_argument("classifier: needs >= 4 input channels");
  ClassifierNet net;
  net.in_channels = in_channels;
  const int mid1 = in_channels / 2;
  const int mid2 = in_channels / 4;
  net.w1 = conv1x1_weight(mid1, in_channels, rng);
  net.b1 = Tensor::zeros(Shape{mid1}, true);
  net.w2 = conv1x1_weight(mid2, mid1, rng);
  net.b2 = Tensor::zeros(Shape{mid2}, true);
  net.w3 = conv1x1_weight(1, mid2, rng);
  net.b3 = Tensor::zeros(Shape{1}, true);
  // softplus(0.5413...) ~= 1.0
  net.time_scale_raw = Tensor::scalar(0.5413248546129181, true);
  net.slope_scale_raw = Tensor::scalar(0.5413248546129181, true);
  return net;
}

std::vector<Parameter> ClassifierNet::parameters() {
  std::vector<Parameter> out;
  out.push_back({"classifier.w1", w1, false});
  out.push_back({"classifier.b1", b1, false});
  out.push_back({"classifier.w2", w2, false});
  out.push_back({"classifier.b2", b2, false});
  out.push_back({"classifier.w3", w3, false});
  out.push_back({"classifier.b3", b3, false});
  out.push_back({"classifier.time_scale", time_scale_raw, true});
  out.push_back({"classifier.slope_scale", slope_scale_raw, true});
  return out;
}

Tensor spatial_entropy(const Tensor& positive_map) {
  const Tensor mass = sum_all(positive_map);
  const Tensor normalized = div(positive_map, mass);
  return neg(sum_all(xlogx(normalized)));
}

ClassifierOutput classifier_forward(const ClassifierNet& net, const Tensor& f) {
  if (f.rank() != 4 || f.dim(0) != net.in_channels)
    throw std::invalid_argument(
        "classifier: feature map must be [" + std::to_string(net.in_channels) +
        ",h,w,d], got " + shape_to_string(f.shape()));
  for (double v : f.data())
    if (!std::isfinite(v))
      throw std::runtime_error("classifier: non-finite feature input");

  Tensor h = elu(conv3d(f, net.w1, net.b1));
  h = elu(conv3d(h, net.w2, net.b2));
  ClassifierOutput out;
  out.saliency = softplus(conv3d(h, net.w3, net.b3));

  // Time estimate: reciprocal of the scaled global average of M.
  const Tensor pooled = gap(out.saliency);
  out.time_b = div(Tensor::scalar(1.0),
                   mul(softplus(net.time_scale_raw), pooled));

  // Slope: sigmoid of the scaled spatial entropy of M.
  out.slope_a = sigmoid(
      mul(softplus(net.slope_scale_raw), spatial_entropy(out.saliency)));
  return out;
}

CdfParams to_params(const ClassifierOutput& out) {
  return CdfParams{out.slope_a.value(), out.time_b.value()};
}

double cdf_probability(const CdfParams& params, double t) {
  const double z = (t - params.b) / (params.a + kSlopeFloor);
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Tensor cdf_probability(const Tensor& slope_a, const Tensor& time_b, double t) {
  return sigmoid(
      div(sub_from_scalar(t, time_b), add_scalar(slope_a, kSlopeFloor)));
}

double risk_score(const CdfParams& params) {
  return 2.0 / (1.0 + std::exp(params.b / (params.a + kSlopeFloor)));
}

RiskGroup risk_group(double r) {
  if (r < 0.0 || r > 1.0)
    throw std::invalid_argument("risk_group: score outside [0,1]");
  if (r <= 0.33) return RiskGroup::Low;
  if (r <= 0.67) return RiskGroup::Moderate;
  return RiskGroup::High;
}

const char* risk_group_name(RiskGroup g) {
  switch (g) {
    case RiskGroup::Low:
      return "low";
    case RiskGroup::Moderate:
      return "moderate";
    case RiskGroup::High:
      return "high";
  }
  return "?";
}

bool record_straddles_horizon(const ConversionRecord& rec) {
  const double tm = rec.t_minus / rec.horizon;
  const double tp = rec.t_plus / rec.horizon;
  return tm >= 0.0 && tm <= 1.0 && tp > 1.0;
}

RecordCase record_case(const ConversionRecord& rec) {
  if (!(rec.t_minus < rec.t_plus))
    throw std::invalid_argument("record: requires t_minus < t_plus (scan " +
                                rec.scan_id + ")");
  if (rec.t_plus == 0.0) return RecordCase::ConvertedAtScan;
  const double tm = rec.t_minus / rec.horizon;
  const double tp = rec.t_plus / rec.horizon;
  if (tm >= 0.0 && tm <= 1.0 && tp >= 0.0 && tp <= 1.0)
    return RecordCase::WithinHorizon;
  if (tm > 1.0 && tp > 1.0) return RecordCase::BeyondHorizon;
  throw std::invalid_argument(
      "record: label matches no loss case (horizon straddle or negative "
      "anchor); must be rejected at ingestion (scan " +
      rec.scan_id + ")");
}

namespace {

Tensor bce(const Tensor& p, int target) {
  const Tensor pc = clamp(p, kBceClamp, 1.0 - kBceClamp);
  return target == 1 ? neg(log(pc)) : neg(log(sub_from_scalar(1.0, pc)));
}

}  // namespace

Tensor classification_loss(const Tensor& slope_a, const Tensor& time_b,
                           const ConversionRecord& rec) {
  const RecordCase c = record_case(rec);
  Tensor first, second;
  switch (c) {
    case RecordCase::WithinHorizon: {
      const double tp = rec.t_plus / rec.horizon;
      const double tm = rec.t_minus / rec.horizon;
      first = bce(cdf_probability(slope_a, time_b, tp), 1);
      second = bce(cdf_probability(slope_a, time_b, tm), 0);
      break;
    }
    case RecordCase::BeyondHorizon:
      first = bce(cdf_probability(slope_a, time_b, 0.0), 0);
      second = bce(cdf_probability(slope_a, time_b, 1.0), 0);
      break;
    case RecordCase::ConvertedAtScan:
      first = bce(cdf_probability(slope_a, time_b, 0.0), 1);
      second = bce(cdf_probability(slope_a, time_b, 1.0), 1);
      break;
  }
  return mul_scalar(add(first, second), 0.5);
}

TtcLossBreakdown ttc_total_loss(const ClassifierOutput& out,
                                const ConversionRecord& rec,
                                const Tensor& roi_on_grid) {
  if (roi_on_grid.shape() != out.saliency.shape())
    throw std::invalid_argument(
        "ttc_total_loss: ROI grid shape " +
        shape_to_string(roi_on_grid.shape()) + " must match saliency map " +
        shape_to_string(out.saliency.shape()));
  TtcLossBreakdown b;
  b.cls = classification_loss(out.slope_a, out.time_b, rec);
  b.slope_reg = mul_scalar(mul(out.slope_a, out.slope_a), 0.1);
  b.mask_reg = mul_scalar(
      l1_norm(mul(out.saliency, sub_from_scalar(1.0, roi_on_grid))), 0.1);
  b.total = add(add(b.cls, b.slope_reg), b.mask_reg);
  return b;
}

}  // namespace morphtrack
