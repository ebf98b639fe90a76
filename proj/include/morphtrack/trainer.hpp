#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "morphtrack/checkpoint.hpp"
#include "morphtrack/config.hpp"
#include "morphtrack/phantom.hpp"
#include "morphtrack/ssl_loss.hpp"
#include "morphtrack/survival.hpp"
#include "morphtrack/ttc.hpp"

namespace morphtrack {

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled: p -= lr*wd*p after the Adam step
};

struct Adam {
  AdamConfig cfg;
  std::int64_t t = 0;
  std::vector<std::vector<double>> m, v;

  /// Bias-corrected update on every parameter that carries a gradient,
  /// followed by decoupled decay. Parameters without gradients (frozen) are
  /// left byte-identical.
  void step(std::span<Parameter> params, double lr);
};

/// Triangular schedule over one epoch: lr_min at step 0, lr_max at the
/// midpoint, back to lr_min; requires 0 <= step < epoch_len.
double cyclic_lr(int step, int epoch_len, double lr_min, double lr_max);

struct NanLossError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Stage 1: Morph-SSL
// ---------------------------------------------------------------------------

struct SslStepLog {
  std::int64_t step = 0;
  double lr, mse, prc, smt, fld, add, total;
};

struct SslEpochLog {
  int epoch = 0;
  double val_total = 0.0, val_mse = 0.0;
  bool is_best = false;
};

struct SslValMetrics {
  double total = 0.0, mse = 0.0;
};

class SslTrainer {
 public:
  SslTrainer(const RunConfig& cfg, const PhantomDataset& data);

  /// One optimizer update; throws NanLossError on a non-finite loss (the
  /// best-so-far checkpoint on disk stays valid).
  void step();

  /// updates_per_epoch steps, then validation; persists the checkpoint to
  /// out_dir/checkpoint whenever the validation total improves.
  void run_epoch(const std::filesystem::path& out_dir);

  SslValMetrics validate();

  int epoch() const { return epoch_; }
  double best_val() const { return best_val_; }
  MorphModel& model() { return model_; }
  Comparator& comparator() { return comparator_; }
  std::span<Parameter> params() { return params_; }
  const std::vector<SslStepLog>& step_log() const { return step_log_; }
  const std::vector<SslEpochLog>& epoch_log() const { return epoch_log_; }

  /// Full training state (parameters, optimizer moments, comparator, RNG,
  /// counters) for bit-exact resumption.
  void save_state(const std::filesystem::path& dir) const;
  void load_state(const std::filesystem::path& dir);

  void save_checkpoint_to(const std::filesystem::path& ckpt_dir) const;

 private:
  RunConfig cfg_;
  const PhantomDataset& data_;
  MorphModel model_;
  Comparator comparator_;
  std::vector<Parameter> params_;
  Adam adam_;
  Rng data_rng_;
  std::vector<int> train_eyes_;
  std::vector<std::pair<int, std::pair<int, int>>> val_pairs_;  // (eye,(i,j))
  int epoch_ = 0;
  std::int64_t global_step_ = 0;
  double best_val_ = 0.0;
  bool has_best_ = false;
  std::vector<SslStepLog> step_log_;
  std::vector<SslEpochLog> epoch_log_;
};

/// Runs the full schedule; returns the trainer for inspection.
struct SslRunSummary {
  double epoch1_mean_total = 0.0;
  double final_epoch_mean_total = 0.0;
  double untrained_val_total = 0.0, untrained_val_mse = 0.0;
  double best_val_total = 0.0;
};

SslRunSummary train_ssl(const RunConfig& cfg, const PhantomDataset& data,
                        const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Stage 2: time-to-conversion
// ---------------------------------------------------------------------------

struct TtcModel {
  NetConfig cfg;
  Encoder encoder;
  ClassifierNet classifier;
  std::vector<Parameter> parameters();
};

TtcModel make_ttc_model(const NetConfig& cfg, Rng& rng);

enum class TtcMode { Scratch, Freeze, Finetune };
TtcMode ttc_mode_from_string(const std::string& s);
const char* ttc_mode_name(TtcMode m);

struct TtcRecord {
  ConversionRecord rec;
  Tensor volume, roi;
};

struct TtcSplit {
  std::vector<TtcRecord> train, val, test;
  int excluded_straddle = 0;
  int excluded_post_conversion = 0;
};

/// Builds per-record labels for one fold: test = eyes of the fold, the rest
/// split per-eye 85/15 into train/validation. Post-conversion scans and
/// horizon-straddling records are rejected here.
TtcSplit build_ttc_split(const PhantomDataset& data, int fold,
                         std::uint64_t seed, double horizon);

struct TtcStepLog {
  std::int64_t step = 0;
  double lr, cls, slope_reg, mask_reg, total;  // batch means
};

struct TtcEpochLog {
  int epoch = 0;
  double mean_val_auc = 0.0;
  std::vector<double> val_auc_per_t;  // NaN where undefined
  bool is_best = false;
};

class TtcTrainer {
 public:
  /// init_checkpoint: SSL checkpoint for Freeze, the freeze-trained TTC
  /// checkpoint for Finetune, ignored for Scratch.
  TtcTrainer(const RunConfig& cfg, const PhantomDataset& data, TtcMode mode,
             const std::filesystem::path& init_checkpoint);

  void run_epoch(const std::filesystem::path& out_dir);
  TtcEpochLog validate();

  int epoch() const { return epoch_; }
  TtcModel& model() { return model_; }
  std::span<Parameter> params() { return params_; }
  const TtcSplit& split() const { return split_; }
  const std::vector<TtcStepLog>& step_log() const { return step_log_; }
  const std::vector<TtcEpochLog>& epoch_log() const { return epoch_log_; }
  TtcMode mode() const { return mode_; }

  void save_checkpoint_to(const std::filesystem::path& ckpt_dir) const;

 private:
  TtcLossBreakdown record_loss(const TtcRecord& record, bool augment);
  RunConfig cfg_;
  const PhantomDataset& data_;
  TtcMode mode_;
  TtcModel model_;
  std::vector<Parameter> params_;
  TtcSplit split_;
  Adam adam_;
  Rng data_rng_;
  int epoch_ = 0;
  std::int64_t global_step_ = 0;
  double best_metric_ = 0.0;
  bool has_best_ = false;
  std::vector<TtcStepLog> step_log_;
  std::vector<TtcEpochLog> epoch_log_;
};

struct TtcRunSummary {
  double best_mean_val_auc = 0.0;
};

TtcRunSummary train_ttc(const RunConfig& cfg, const PhantomDataset& data,
                        TtcMode mode, const std::filesystem::path& init_ckpt,
                        const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct ScanPrediction {
  ConversionRecord rec;
  CdfParams params;
  std::vector<double> p_at;  // one per configured time point
  double risk = 0.0;
  RiskGroup group = RiskGroup::Low;
};

struct MetricsRow {
  double t_months = 0.0;
  bool defined = false;
  double auc = 0.0, bal_acc = 0.0;
};

struct KmCurvePoint {
  double time, survival;
  int group;
};

struct EvalResult {
  int fold = 0;
  std::vector<double> time_points;
  std::vector<ScanPrediction> predictions;
  bool threshold_defined = false;
  double threshold = 0.0;
  std::vector<MetricsRow> rows;
  std::vector<KmCurvePoint> km;
  bool logrank_defined = false;
  LogRankResult logrank;
};

/// Metrics/KM bundle from per-record CDF parameters (the model-free core of
/// `evaluate`, also exercised with oracle predictions in tests).
EvalResult eval_from_predictions(const std::vector<TtcRecord>& records,
                                 const std::vector<CdfParams>& params,
                                 const PhantomDataset& data, int fold,
                                 const RunConfig& cfg);

EvalResult evaluate_fold(const TtcModel& model, const PhantomDataset& data,
                         int fold, const RunConfig& cfg);

/// predictions.csv, metrics.csv, km.csv, logrank.csv under out_dir.
void write_eval_outputs(const EvalResult& result,
                        const std::filesystem::path& out_dir);

}  // namespace morphtrack
