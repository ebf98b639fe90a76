#include "morphtrack/survival.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>

namespace morphtrack {

double StepFunction::at(double t) const {
  double v = 1.0;
  for (std::size_t i = 0; i < times.size() && times[i] <= t; ++i) v = values[i];
  return v;
}

std::optional<int> label_at_horizon(const ConversionRecord& rec, double t) {
  if (rec.t_plus <= t) return 1;
  if (rec.t_minus >= t) return 0;
  return std::nullopt;
}

StepFunction kaplan_meier(const std::vector<SurvivalSample>& samples) {
  if (samples.empty())
    throw std::invalid_argument("kaplan_meier: no samples");
  // Events and censorings grouped by time; events shrink the curve while the
  // subject is still counted at risk, censorings only leave the risk set.
  std::map<double, std::pair<int, int>> by_time;  // time -> (events, censored)
  for (const SurvivalSample& s : samples) {
    if (!(s.time > 0.0) || !std::isfinite(s.time))
      throw std::invalid_argument("kaplan_meier: times must be positive finite");
    auto& slot = by_time[s.time];
    (s.event ? slot.first : slot.second) += 1;
  }
  StepFunction sf;
  double surv = 1.0;
  int at_risk = static_cast<int>(samples.size());
  for (const auto& [time, counts] : by_time) {
    const auto [events, censored] = counts;
    if (events > 0) {
      surv *= 1.0 - static_cast<double>(events) / at_risk;
      sf.times.push_back(time);
      sf.values.push_back(surv);
    }
    at_risk -= events + censored;
  }
  return sf;
}

namespace {

// Solves the symmetric positive (semi)definite system V x = u in place via
// Gaussian elimination with partial pivoting. Dimension is k-1 (tiny).
std::vector<double> solve_linear(std::vector<std::vector<double>> v,
                                 std::vector<double> u) {
  const std::size_t n = u.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::fabs(v[r][col]) > std::fabs(v[piv][col])) piv = r;
    if (std::fabs(v[piv][col]) < 1e-300)
      throw std::runtime_error("log_rank: degenerate covariance matrix");
    std::swap(v[piv], v[col]);
    std::swap(u[piv], u[col]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = v[r][col] / v[col][col];
      for (std::size_t c = col; c < n; ++c) v[r][c] -= f * v[col][c];
      u[r] -= f * u[col];
    }
  }
  std::vector<double> x(n, 0.0);
  for (std::size_t r = n; r-- > 0;) {
    double s = u[r];
    for (std::size_t c = r + 1; c < n; ++c) s -= v[r][c] * x[c];
    x[r] = s / v[r][r];
  }
  return x;
}

}  // namespace

LogRankResult log_rank_test(
    const std::vector<std::vector<SurvivalSample>>& groups) {
  const std::size_t k = groups.size();
  if (k < 2)
    throw std::invalid_argument("log_rank: needs at least two groups");
  for (const auto& g : groups)
    if (g.empty())
      throw std::invalid_argument("log_rank: a group has zero at-risk mass");

  std::set<double> event_times;
  for (const auto& g : groups)
    for (const SurvivalSample& s : g)
      if (s.event) event_times.insert(s.time);

  std::vector<double> observed(k, 0.0), expected(k, 0.0);
  std::vector<std::vector<double>> cov(k, std::vector<double>(k, 0.0));
  for (double t : event_times) {
    double n_total = 0.0, d_total = 0.0;
    std::vector<double> n_g(k, 0.0), d_g(k, 0.0);
    for (std::size_t g = 0; g < k; ++g) {
      for (const SurvivalSample& s : groups[g]) {
        if (s.time >= t) n_g[g] += 1.0;
        if (s.event && s.time == t) d_g[g] += 1.0;
      }
      n_total += n_g[g];
      d_total += d_g[g];
    }
    for (std::size_t g = 0; g < k; ++g) {
      observed[g] += d_g[g];
      expected[g] += d_total * n_g[g] / n_total;
    }
    if (n_total > 1.0) {
      const double hyper =
          d_total * (n_total - d_total) / (n_total - 1.0) / (n_total * n_total);
      for (std::size_t g = 0; g < k; ++g)
        for (std::size_t h2 = 0; h2 < k; ++h2) {
          const double kron = g == h2 ? 1.0 : 0.0;
          cov[g][h2] += hyper * n_g[g] * (kron * n_total - n_g[h2]);
        }
    }
  }

  // Drop the last group; the statistic is u' V^{-1} u on the remainder.
  const std::size_t m = k - 1;
  std::vector<double> u(m);
  bool all_zero = true;
  for (std::size_t g = 0; g < m; ++g) {
    u[g] = observed[g] - expected[g];
    all_zero = all_zero && std::fabs(u[g]) < 1e-12;
  }
  LogRankResult res;
  res.df = static_cast<int>(m);
  if (all_zero || event_times.empty()) {
    res.chi2 = 0.0;
    res.p = 1.0;
    return res;
  }
  std::vector<std::vector<double>> vsub(m, std::vector<double>(m));
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < m; ++c) vsub[r][c] = cov[r][c];
  const std::vector<double> x = solve_linear(vsub, u);
  double chi2 = 0.0;
  for (std::size_t g = 0; g < m; ++g) chi2 += u[g] * x[g];
  res.chi2 = std::max(chi2, 0.0);
  res.p = chi2_survival(res.chi2, res.df);
  return res;
}

double roc_auc(const std::vector<double>& scores,
               const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("roc_auc: scores/labels length mismatch");
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  std::int64_t n_pos = 0, n_neg = 0;
  for (int l : labels) (l ? n_pos : n_neg) += 1;
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("roc_auc: both classes must be present");

  // Twice the Mann-Whitney numerator stays integral: 2 per win, 1 per tie.
  std::int64_t numerator2 = 0;
  std::int64_t neg_below = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    std::int64_t pos_here = 0, neg_here = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? pos_here : neg_here) += 1;
      ++j;
    }
    numerator2 += pos_here * (2 * neg_below + neg_here);
    neg_below += neg_here;
    i = j;
  }
  return static_cast<double>(numerator2) /
         (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

namespace {

double youden_j(const std::vector<double>& scores,
                const std::vector<int>& labels, double tau) {
  std::int64_t tp = 0, fn = 0, tn = 0, fp = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= tau;
    if (labels[i]) (pred ? tp : fn) += 1;
    else (pred ? fp : tn) += 1;
  }
  const double sens = static_cast<double>(tp) / (tp + fn);
  const double spec = static_cast<double>(tn) / (tn + fp);
  return sens + spec - 1.0;
}

}  // namespace

double youden_threshold(const std::vector<std::vector<double>>& scores_by_t,
                        const std::vector<std::vector<int>>& labels_by_t) {
  if (scores_by_t.empty() || scores_by_t.size() != labels_by_t.size())
    throw std::invalid_argument("youden_threshold: malformed inputs");
  std::set<double> unique_scores;
  for (std::size_t t = 0; t < scores_by_t.size(); ++t) {
    if (scores_by_t[t].size() != labels_by_t[t].size())
      throw std::invalid_argument("youden_threshold: length mismatch at a time point");
    bool has_pos = false, has_neg = false;
    for (int l : labels_by_t[t]) (l ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg)
      throw std::invalid_argument(
          "youden_threshold: each time point needs both classes");
    unique_scores.insert(scores_by_t[t].begin(), scores_by_t[t].end());
  }
  std::vector<double> sorted(unique_scores.begin(), unique_scores.end());
  std::vector<double> candidates;
  for (std::size_t i = 0; i + 1 < sorted.size(); ++i)
    candidates.push_back(0.5 * (sorted[i] + sorted[i + 1]));
  if (candidates.empty()) candidates.push_back(sorted.front());

  double best_tau = candidates.front();
  double best_j = -std::numeric_limits<double>::infinity();
  for (double tau : candidates) {
    double acc = 0.0;
    for (std::size_t t = 0; t < scores_by_t.size(); ++t)
      acc += youden_j(scores_by_t[t], labels_by_t[t], tau);
    const double mean_j = acc / static_cast<double>(scores_by_t.size());
    if (mean_j > best_j) {
      best_j = mean_j;
      best_tau = tau;
    }
  }
  return best_tau;
}

double balanced_accuracy(const std::vector<int>& predicted,
                         const std::vector<int>& labels) {
  if (predicted.size() != labels.size())
    throw std::invalid_argument("balanced_accuracy: length mismatch");
  std::int64_t tp = 0, fn = 0, tn = 0, fp = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) (predicted[i] ? tp : fn) += 1;
    else (predicted[i] ? fp : tn) += 1;
  }
  if (tp + fn == 0 || tn + fp == 0)
    throw std::invalid_argument("balanced_accuracy: both classes must be present");
  const double sens = static_cast<double>(tp) / (tp + fn);
  const double spec = static_cast<double>(tn) / (tn + fp);
  return 0.5 * (sens + spec);
}

namespace {

// Regularized incomplete gamma: series for x < a+1, Lentz continued fraction
// otherwise. Relative accuracy ~1e-14 over the chi-square range used here.
double gamma_p_series(double a, double x) {
  double ap = a;
  double sum = 1.0 / a;
  double del = sum;
  for (int n = 0; n < 500; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::fabs(del) < std::fabs(sum) * 1e-16) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

double gamma_q_cf(double a, double x) {
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= 500; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1.0) < 1e-16) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

double regularized_gamma_q(double a, double x) {
  if (x < 0.0 || a <= 0.0)
    throw std::invalid_argument("gamma_q: bad arguments");
  if (x == 0.0) return 1.0;
  if (x < a + 1.0) return 1.0 - gamma_p_series(a, x);
  return gamma_q_cf(a, x);
}

}  // namespace

double chi2_survival(double chi2, int df) {
  if (df < 1) throw std::invalid_argument("chi2_survival: df must be >= 1");
  if (chi2 <= 0.0) return 1.0;
  return regularized_gamma_q(0.5 * df, 0.5 * chi2);
}

}  // namespace morphtrack
