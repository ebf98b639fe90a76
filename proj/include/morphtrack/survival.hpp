#pragma once

#include <optional>
#include <vector>

#include "morphtrack/ttc.hpp"

namespace morphtrack {

struct SurvivalSample {
  double time = 0.0;   // months, event or censoring time, > 0
  bool event = false;  // true = conversion observed
  int group = 0;
};

/// Right-continuous survival step function starting at 1.
struct StepFunction {
  std::vector<double> times;   // event times where the curve drops
  std::vector<double> values;  // survival just after each drop
  double at(double t) const;
};

/// Horizon label for "converted within t months": 1 when t_plus <= t,
/// 0 when t_minus >= t, excluded when t lies strictly inside the censoring
/// interval.
std::optional<int> label_at_horizon(const ConversionRecord& rec, double t);

/// Product-limit estimator; at tied times events are processed before
/// censorings. Throws on empty input.
StepFunction kaplan_meier(const std::vector<SurvivalSample>& samples);

struct LogRankResult {
  double chi2 = 0.0;
  double p = 1.0;
  int df = 0;
};

/// k-sample log-rank test with the full covariance statistic; p from the
/// chi-square upper tail. Throws unless >= 2 non-empty groups.
LogRankResult log_rank_test(const std::vector<std::vector<SurvivalSample>>& groups);

/// Mann-Whitney AUC with ties counted 1/2; exact pair-count arithmetic.
/// Throws unless both classes are present.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Single threshold (midpoints of pooled sorted unique scores) maximizing the
/// mean of Youden's J across time points; ties resolved to the smallest
/// threshold. Classification rule: score >= tau is positive.
double youden_threshold(const std::vector<std::vector<double>>& scores_by_t,
                        const std::vector<std::vector<int>>& labels_by_t);

double balanced_accuracy(const std::vector<int>& predicted,
                         const std::vector<int>& labels);

/// Upper tail of the chi-square distribution via the regularized incomplete
/// gamma function (series + continued fraction).
double chi2_survival(double chi2, int df);

}  // namespace morphtrack
