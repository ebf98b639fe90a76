#include <cmath>
#include <limits>
#include <stdexcept>

#include "doctest.h"
#include "morphtrack/ttc.hpp"
#include "morphtrack/warp.hpp"
#include "test_util.hpp"

using namespace morphtrack;

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

ConversionRecord make_record(double tm, double tp) {
  ConversionRecord r;
  r.scan_id = "scan";
  r.eye_id = "eye";
  r.t_minus = tm;
  r.t_plus = tp;
  return r;
}
}  // namespace

TEST_CASE("classifier forward: positive saliency, a in (0,1), b > 0") {
  Rng rng(1);
  ClassifierNet net = make_classifier(16, rng);
  Tensor f = mt_test::random_tensor({16, 2, 2, 2}, rng, 0.3);
  ClassifierOutput out = classifier_forward(net, f);
  CHECK(out.saliency.shape() == Shape{1, 2, 2, 2});
  for (double v : out.saliency.data()) CHECK(v > 0.0);
  CHECK(out.slope_a.value() > 0.0);
  CHECK(out.slope_a.value() < 1.0);
  CHECK(out.time_b.value() > 0.0);
}

TEST_CASE("classifier: constant map gives maximum entropy, a is scale "
          "invariant, b halves when M doubles") {
  Rng rng(2);
  ClassifierNet net = make_classifier(8, rng);
  // Zero out the convs so the map is constant softplus(bias).
  for (Tensor w : {net.w1, net.w2, net.w3})
    for (double& v : w.mutable_data()) v = 0.0;
  Tensor f = mt_test::random_tensor({8, 2, 2, 3}, rng);
  ClassifierOutput out = classifier_forward(net, f);
  const double n = 2.0 * 2.0 * 3.0;
  // Entropy of the (uniform) normalized map.
  const Tensor mass = sum_all(out.saliency);
  const Tensor mp = div(out.saliency, mass);
  const double entropy = -sum_all(xlogx(mp)).value();
  CHECK(entropy == doctest::Approx(std::log(n)).epsilon(1e-9));

  // a invariance and b scaling under M -> 2M, checked through the formulas.
  const Tensor m2 = mul_scalar(out.saliency, 2.0);
  const Tensor mp2 = div(m2, sum_all(m2));
  const double entropy2 = -sum_all(xlogx(mp2)).value();
  CHECK(entropy2 == doctest::Approx(entropy).epsilon(1e-9));
  const double b1 = 1.0 / gap(out.saliency).data()[0];
  const double b2 = 1.0 / gap(m2).data()[0];
  CHECK(b2 == doctest::Approx(0.5 * b1).epsilon(1e-12));
}

TEST_CASE("classifier rejects non-finite features") {
  Rng rng(3);
  ClassifierNet net = make_classifier(8, rng);
  Tensor f = Tensor::zeros({8, 2, 2, 2});
  f.mutable_data()[3] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(classifier_forward(net, f), std::runtime_error);
}

TEST_CASE("sigmoidal CDF: midpoint, steep limit, monotonicity") {
  CHECK(cdf_probability(CdfParams{0.3, 0.4}, 0.4) == doctest::Approx(0.5));
  // a -> 0+ with t = b + 0.5: denominator 0.05, p = 1/(1+e^{-10}).
  CHECK(cdf_probability(CdfParams{0.0, 0.2}, 0.7) ==
        doctest::Approx(1.0 / (1.0 + std::exp(-10.0))).epsilon(1e-12));

  Rng rng(4);
  for (int rep = 0; rep < 1000; ++rep) {
    const CdfParams p{rng.uniform(0.0, 1.0), rng.uniform(1e-3, 3.0)};
    double prev = -1.0;
    for (int i = 0; i <= 100; ++i) {
      const double t = i / 100.0;
      const double v = cdf_probability(p, t);
      CHECK(v >= prev);
      prev = v;
    }
    CHECK(cdf_probability(p, 6.0 / 18) <= cdf_probability(p, 12.0 / 18));
    CHECK(cdf_probability(p, 12.0 / 18) <= cdf_probability(p, 18.0 / 18));
  }
}

TEST_CASE("tensor and scalar CDF routes agree") {
  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const double a = rng.uniform(0.05, 0.95);
    const double b = rng.uniform(0.05, 2.0);
    const double t = rng.uniform(0.0, 1.0);
    const double via_tensor =
        cdf_probability(Tensor::scalar(a), Tensor::scalar(b), t).value();
    CHECK(via_tensor ==
          doctest::Approx(cdf_probability(CdfParams{a, b}, t)).epsilon(1e-15));
  }
}

TEST_CASE("classification loss: case selection and closed forms") {
  SUBCASE("perfect within-horizon fit matches its closed form") {
    // T- = 0.3, T+ = 0.7 normalized and b at their midpoint with the slope
    // at its floor: both anchors sit at |t-b|/(a+0.05) = 4, so the loss is
    // exactly -ln(sigmoid(4)) ~= 0.0181 (its floor-limited minimum).
    ConversionRecord rec = make_record(0.3 * 18, 0.7 * 18);
    Tensor a = Tensor::scalar(0.0);
    Tensor b = Tensor::scalar(0.5);
    const double expected = -std::log(1.0 / (1.0 + std::exp(-4.0)));
    CHECK(std::fabs(classification_loss(a, b, rec).value() - expected) < 1e-9);
    CHECK(classification_loss(a, b, rec).value() < 0.02);
  }
  SUBCASE("beyond-horizon with large b and small a is nearly free") {
    ConversionRecord rec = make_record(30.0, kInf);
    CHECK(classification_loss(Tensor::scalar(0.05), Tensor::scalar(5.0), rec)
              .value() < 1e-3);
  }
  SUBCASE("p=0.5 at both anchors costs ln 2") {
    // Symmetric anchors around b with a very flat... instead use anchors at
    // b so p = 0.5 exactly at both: T-=T+=b impossible; use b such that both
    // anchor probabilities are 0.5 via degenerate same-time anchors is not a
    // valid record, so check the single-anchor identity directly.
    ConversionRecord rec = make_record(0.5 * 18, 0.5 * 18 + 1e-9);
    Tensor a = Tensor::scalar(1.0);
    Tensor b = Tensor::scalar(0.5);
    // Both anchors essentially at t=0.5=b: each BCE is ln 2.
    CHECK(classification_loss(a, b, rec).value() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-6));
  }
  SUBCASE("converted-at-scan pushes probabilities up at both ends") {
    ConversionRecord rec = make_record(-1.0, 0.0);
    CHECK(record_case(rec) == RecordCase::ConvertedAtScan);
    const double loose =
        classification_loss(Tensor::scalar(0.5), Tensor::scalar(1.0), rec)
            .value();
    const double tight =
        classification_loss(Tensor::scalar(0.5), Tensor::scalar(0.01), rec)
            .value();
    CHECK(tight < loose);
  }
  SUBCASE("straddling records are rejected") {
    ConversionRecord rec = make_record(12.0, 30.0);
    CHECK(record_straddles_horizon(rec));
    CHECK_THROWS_AS(record_case(rec), std::invalid_argument);
    CHECK_THROWS_AS(
        classification_loss(Tensor::scalar(0.5), Tensor::scalar(1.0), rec),
        std::invalid_argument);
  }
  SUBCASE("case tags are mutually exclusive over valid records") {
    CHECK(record_case(make_record(6.0, 12.0)) == RecordCase::WithinHorizon);
    CHECK(record_case(make_record(20.0, kInf)) == RecordCase::BeyondHorizon);
    CHECK(record_case(make_record(0.0, 18.0)) == RecordCase::WithinHorizon);
    CHECK_THROWS_AS(record_case(make_record(5.0, 3.0)), std::invalid_argument);
  }
}

TEST_CASE("ttc_total_loss: term bookkeeping and mask penalty support") {
  Rng rng(6);
  ClassifierNet net = make_classifier(8, rng);
  Tensor f = mt_test::random_tensor({8, 2, 2, 2}, rng, 0.3);
  ClassifierOutput out = classifier_forward(net, f);
  ConversionRecord rec = make_record(6.0, 12.0);

  SUBCASE("saliency inside the ROI incurs no mask penalty") {
    Tensor roi = Tensor::full({1, 2, 2, 2}, 1.0);
    TtcLossBreakdown b = ttc_total_loss(out, rec, roi);
    CHECK(b.mask_reg.value() == 0.0);
  }
  SUBCASE("slope regularizer is 0.1*a^2") {
    Tensor roi = Tensor::full({1, 2, 2, 2}, 1.0);
    TtcLossBreakdown b = ttc_total_loss(out, rec, roi);
    const double a = out.slope_a.value();
    CHECK(b.slope_reg.value() == doctest::Approx(0.1 * a * a).epsilon(1e-15));
  }
  SUBCASE("total re-sums from the logged terms bit-exactly") {
    Tensor roi = Tensor::full({1, 2, 2, 2}, 0.0);
    TtcLossBreakdown b = ttc_total_loss(out, rec, roi);
    CHECK(b.total.value() ==
          ((b.cls.value() + b.slope_reg.value()) + b.mask_reg.value()));
    CHECK(b.mask_reg.value() > 0.0);  // all saliency mass outside the ROI
  }
  SUBCASE("shape mismatch is an error") {
    CHECK_THROWS_AS(ttc_total_loss(out, rec, Tensor::full({1, 3, 2, 2}, 1.0)),
                    std::invalid_argument);
  }
}

TEST_CASE("risk score: boundary behavior and closed form") {
  CHECK(risk_score(CdfParams{0.5, 1e-12}) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(risk_score(CdfParams{0.5, 1e9}) == doctest::Approx(0.0));
  CHECK(risk_score(CdfParams{0.95, 1.0}) ==
        doctest::Approx(2.0 / (1.0 + std::exp(1.0))).epsilon(1e-12));

  Rng rng(7);
  for (int rep = 0; rep < 200; ++rep) {
    const double r = risk_score(
        CdfParams{rng.uniform(0.0, 1.0), rng.uniform(1e-6, 30.0)});
    CHECK(r > 0.0);
    CHECK(r < 1.0);
  }
  // Far outside the double range of exp the score underflows to exactly 0,
  // which still lands in the low-risk group.
  CHECK(risk_score(CdfParams{0.0, 1000.0}) == 0.0);
  CHECK(risk_group(risk_score(CdfParams{0.0, 1000.0})) == RiskGroup::Low);
  // Strictly decreasing in b for fixed a.
  double prev = 1.0;
  for (double b : {0.1, 0.5, 1.0, 2.0, 5.0}) {
    const double r = risk_score(CdfParams{0.4, b});
    CHECK(r < prev);
    prev = r;
  }
}

TEST_CASE("risk groups: boundary values per the closed intervals") {
  CHECK(risk_group(0.33) == RiskGroup::Low);
  CHECK(risk_group(0.5) == RiskGroup::Moderate);
  CHECK(risk_group(0.67) == RiskGroup::Moderate);
  CHECK(risk_group(0.8) == RiskGroup::High);
  CHECK(risk_group(0.0) == RiskGroup::Low);
  CHECK(risk_group(1.0) == RiskGroup::High);
  CHECK_THROWS_AS(risk_group(1.5), std::invalid_argument);
  CHECK(std::string(risk_group_name(RiskGroup::Moderate)) == "moderate");
}

TEST_CASE("classifier and losses pass gradient checks") {
  Rng rng(8);
  ClassifierNet net = make_classifier(8, rng);
  Tensor f = mt_test::random_tensor({8, 2, 2, 3}, rng, 0.3);
  ConversionRecord rec = make_record(6.0, 12.0);
  Tensor roi = Tensor::full({1, 2, 2, 3}, 1.0);
  roi.mutable_data()[0] = 0.0;

  for (int rep = 0; rep < 5; ++rep) {
    Tensor probe = mt_test::random_tensor({8, 2, 2, 3}, rng, 0.3);
    // Through the full head: loss as a function of the feature input.
    const double err_f = grad_check(
        [&](const Tensor& x) {
          return ttc_total_loss(classifier_forward(net, x), rec, roi).total;
        },
        probe, 1e-5);
    CHECK(err_f < 1e-3);
  }

  // As a function of the head weights and scales.
  std::vector<Parameter> params = net.parameters();
  std::vector<Tensor> tensors;
  for (auto& p : params) tensors.push_back(p.tensor);
  Rng pick(9);
  const double err_w = grad_check_params(
      [&]() { return ttc_total_loss(classifier_forward(net, f), rec, roi).total; },
      tensors, 1e-5, 4, pick);
  CHECK(err_w < 1e-3);

  // Directly on the CDF parameters.
  Tensor a0 = Tensor::scalar(0.4);
  Tensor b0 = Tensor::scalar(0.8);
  const double err_a = grad_check(
      [&](const Tensor& a) { return classification_loss(a, b0, rec); }, a0,
      1e-6);
  CHECK(err_a < 1e-4);
  const double err_b = grad_check(
      [&](const Tensor& b) { return classification_loss(a0, b, rec); }, b0,
      1e-6);
  CHECK(err_b < 1e-4);
  const double err_cdf = grad_check(
      [&](const Tensor& a) { return cdf_probability(a, b0, 0.5); }, a0, 1e-6);
  CHECK(err_cdf < 1e-4);
}
