#include "morphtrack/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include "morphtrack/io.hpp"
#include "morphtrack/warp.hpp"

namespace morphtrack {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {
constexpr double kNan = std::numeric_limits<double>::quiet_NaN();
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

void Adam::step(std::span<Parameter> params, double lr) {
  if (m.empty()) {
    m.resize(params.size());
    v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i].assign(params[i].tensor.numel(), 0.0);
      v[i].assign(params[i].tensor.numel(), 0.0);
    }
  }
  if (m.size() != params.size())
    throw std::invalid_argument("adam: parameter list changed size");
  t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    if (!p.tensor.has_grad()) continue;  // frozen or unreached: untouched
    const auto g = p.tensor.grad();
    auto w = p.tensor.mutable_data();
    auto& mi = m[i];
    auto& vi = v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      if (!std::isfinite(gj))
        throw NanLossError("adam: non-finite gradient in " + p.name);
      mi[j] = cfg.beta1 * mi[j] + (1.0 - cfg.beta1) * gj;
      vi[j] = cfg.beta2 * vi[j] + (1.0 - cfg.beta2) * gj * gj;
      const double mhat = mi[j] / bc1;
      const double vhat = vi[j] / bc2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
      if (cfg.weight_decay != 0.0) w[j] -= lr * cfg.weight_decay * w[j];
    }
  }
}

double cyclic_lr(int step, int epoch_len, double lr_min, double lr_max) {
  if (step < 0 || step >= epoch_len)
    throw std::invalid_argument("cyclic_lr: step outside [0, epoch_len)");
  const double phase = static_cast<double>(step) / epoch_len;
  const double tri = 1.0 - std::fabs(2.0 * phase - 1.0);
  return lr_min + (lr_max - lr_min) * tri;
}

// ---------------------------------------------------------------------------
// State blobs
// ---------------------------------------------------------------------------

namespace {

void append_doubles(std::string& blob, std::span<const double> v) {
  blob.append(reinterpret_cast<const char*>(v.data()),
              v.size() * sizeof(double));
}

void take_doubles(const std::string& blob, std::size_t& off,
                  std::span<double> out) {
  if (off + out.size() * sizeof(double) > blob.size())
    throw std::runtime_error("state: blob shorter than expected");
  std::memcpy(out.data(), blob.data() + off, out.size() * sizeof(double));
  off += out.size() * sizeof(double);
}

}  // namespace

// ---------------------------------------------------------------------------
// SSL trainer
// ---------------------------------------------------------------------------

SslTrainer::SslTrainer(const RunConfig& cfg, const PhantomDataset& data)
    : cfg_(cfg), data_(data), data_rng_(0) {
  cfg_.net.h = data.cfg.h;
  cfg_.net.w = data.cfg.w;
  cfg_.net.d = data.cfg.d;
  Rng root(cfg_.seed);
  Rng init_rng = root.fork(10);
  data_rng_ = root.fork(11);
  model_ = make_morph_model(cfg_.net, init_rng);
  comparator_ = make_comparator(model_.encoder.prefix, cfg_.ssl.ema_momentum);
  params_ = model_.parameters();
  adam_.cfg.weight_decay = cfg_.ssl.weight_decay;

  const double window = data_.cfg.pair_window_months;
  for (std::size_t i = 0; i < data_.eyes.size(); ++i) {
    const EyeSeries& e = data_.eyes[i];
    if (e.split == "ssl_train" && !eligible_pairs(e, window).empty())
      train_eyes_.push_back(static_cast<int>(i));
  }
  if (train_eyes_.empty())
    throw std::runtime_error("ssl: no training eye has an eligible pair");

  std::vector<std::pair<int, std::pair<int, int>>> all_val;
  for (std::size_t i = 0; i < data_.eyes.size(); ++i) {
    const EyeSeries& e = data_.eyes[i];
    if (e.split != "ssl_val") continue;
    for (const auto& pr : eligible_pairs(e, window))
      all_val.push_back({static_cast<int>(i), pr});
  }
  if (all_val.empty())
    throw std::runtime_error("ssl: validation split has no eligible pair");
  const std::size_t want =
      std::min<std::size_t>(all_val.size(),
                            static_cast<std::size_t>(cfg_.ssl.val_pairs));
  for (std::size_t k = 0; k < want; ++k)
    val_pairs_.push_back(all_val[k * all_val.size() / want]);
}

void SslTrainer::step() {
  const int updates = cfg_.ssl.updates_per_epoch;
  const int in_epoch = static_cast<int>(global_step_ % updates);
  const double lr =
      cyclic_lr(in_epoch, updates, cfg_.ssl.lr_min, cfg_.ssl.lr_max);

  const EyeSeries& eye = data_.eyes[static_cast<std::size_t>(
      train_eyes_[static_cast<std::size_t>(data_rng_.uniform_int(
          0, static_cast<std::int64_t>(train_eyes_.size()) - 1))])];
  const auto [ia, ib] =
      sample_ssl_pair(eye, data_rng_, data_.cfg.pair_window_months);

  SslPair pair;
  pair.vol_t = eye.visits[static_cast<std::size_t>(ia)].volume;
  pair.roi_t = eye.visits[static_cast<std::size_t>(ia)].roi;
  pair.vol_tk = eye.visits[static_cast<std::size_t>(ib)].volume;
  pair.roi_tk = eye.visits[static_cast<std::size_t>(ib)].roi;
  augment_pair(pair.vol_t, pair.roi_t, pair.vol_tk, pair.roi_tk, data_rng_,
               cfg_.augment);

  const SslLossBreakdown loss =
      total_ssl_loss(pair, model_, comparator_, LossWeights{});
  const double total = loss.total.value();
  if (!std::isfinite(total))
    throw NanLossError("ssl: non-finite loss at step " +
                       std::to_string(global_step_));
  for (Parameter& p : params_) p.tensor.zero_grad();
  backward(loss.total);
  adam_.step(params_, lr);
  ema_update(comparator_, model_.encoder.prefix, comparator_.momentum);

  step_log_.push_back({global_step_, lr, loss.mse.value(), loss.prc.value(),
                       loss.smt.value(), loss.fld.value(), loss.add.value(),
                       total});
  ++global_step_;
}

SslValMetrics SslTrainer::validate() {
  SslValMetrics acc;
  for (const auto& [eye_idx, pr] : val_pairs_) {
    const EyeSeries& eye = data_.eyes[static_cast<std::size_t>(eye_idx)];
    SslPair pair;
    pair.vol_t = eye.visits[static_cast<std::size_t>(pr.first)].volume;
    pair.roi_t = eye.visits[static_cast<std::size_t>(pr.first)].roi;
    pair.vol_tk = eye.visits[static_cast<std::size_t>(pr.second)].volume;
    pair.roi_tk = eye.visits[static_cast<std::size_t>(pr.second)].roi;
    const SslLossBreakdown loss =
        total_ssl_loss(pair, model_, comparator_, LossWeights{});
    acc.total += loss.total.value();
    acc.mse += loss.mse.value();
  }
  acc.total /= static_cast<double>(val_pairs_.size());
  acc.mse /= static_cast<double>(val_pairs_.size());
  return acc;
}

void SslTrainer::run_epoch(const fs::path& out_dir) {
  for (int u = 0; u < cfg_.ssl.updates_per_epoch; ++u) step();
  const SslValMetrics vm = validate();
  const bool best = !has_best_ || vm.total < best_val_;
  if (best) {
    best_val_ = vm.total;
    has_best_ = true;
    if (!out_dir.empty()) save_checkpoint_to(out_dir / "checkpoint");
  }
  epoch_log_.push_back({epoch_, vm.total, vm.mse, best});
  ++epoch_;
}

void SslTrainer::save_checkpoint_to(const fs::path& ckpt_dir) const {
  ordered_json echo;
  echo["stage"] = "ssl";
  echo["run_config"] = run_config_to_json(cfg_);
  save_checkpoint(ckpt_dir,
                  std::span<Parameter>(const_cast<Parameter*>(params_.data()),
                                       params_.size()),
                  echo);
}

void SslTrainer::save_state(const fs::path& dir) const {
  fs::create_directories(dir);
  ordered_json j;
  j["epoch"] = epoch_;
  j["global_step"] = global_step_;
  j["best_val"] = best_val_;
  j["has_best"] = has_best_;
  j["adam_t"] = adam_.t;
  j["adam_initialized"] = !adam_.m.empty();
  j["data_rng"] = data_rng_.save_state();
  write_file_atomic(dir / "state.json", j.dump(2) + "\n");

  std::string blob;
  for (const Parameter& p : params_) append_doubles(blob, p.tensor.data());
  for (const auto& mi : adam_.m) append_doubles(blob, mi);
  for (const auto& vi : adam_.v) append_doubles(blob, vi);
  std::vector<Parameter> comp;
  const_cast<Comparator&>(comparator_).prefix.collect("comparator", comp);
  for (const Parameter& p : comp) append_doubles(blob, p.tensor.data());
  write_file_atomic(dir / "state.bin", blob);
}

void SslTrainer::load_state(const fs::path& dir) {
  const ordered_json j = ordered_json::parse(read_file(dir / "state.json"));
  epoch_ = j.at("epoch");
  global_step_ = j.at("global_step");
  best_val_ = j.at("best_val");
  has_best_ = j.at("has_best");
  adam_.t = j.at("adam_t");
  data_rng_.load_state(j.at("data_rng").get<std::string>());

  const std::string blob = read_file(dir / "state.bin");
  std::size_t off = 0;
  for (Parameter& p : params_) take_doubles(blob, off, p.tensor.mutable_data());
  if (j.at("adam_initialized").get<bool>()) {
    if (adam_.m.empty()) {
      adam_.m.resize(params_.size());
      adam_.v.resize(params_.size());
      for (std::size_t i = 0; i < params_.size(); ++i) {
        adam_.m[i].assign(params_[i].tensor.numel(), 0.0);
        adam_.v[i].assign(params_[i].tensor.numel(), 0.0);
      }
    }
    for (auto& mi : adam_.m)
      take_doubles(blob, off, {mi.data(), mi.size()});
    for (auto& vi : adam_.v)
      take_doubles(blob, off, {vi.data(), vi.size()});
  } else {
    adam_.m.clear();
    adam_.v.clear();
  }
  std::vector<Parameter> comp;
  comparator_.prefix.collect("comparator", comp);
  for (Parameter& p : comp) take_doubles(blob, off, p.tensor.mutable_data());
  if (off != blob.size())
    throw std::runtime_error("state: trailing bytes in state.bin");
}

SslRunSummary train_ssl(const RunConfig& cfg, const PhantomDataset& data,
                        const fs::path& out_dir) {
  SslTrainer trainer(cfg, data);
  SslRunSummary s;
  const SslValMetrics before = trainer.validate();
  s.untrained_val_total = before.total;
  s.untrained_val_mse = before.mse;
  for (int e = 0; e < cfg.ssl.epochs; ++e) trainer.run_epoch(out_dir);
  const auto& steps = trainer.step_log();
  const int per_epoch = cfg.ssl.updates_per_epoch;
  double first = 0.0, last = 0.0;
  for (int u = 0; u < per_epoch; ++u) {
    first += steps[static_cast<std::size_t>(u)].total;
    last += steps[steps.size() - static_cast<std::size_t>(per_epoch) +
                  static_cast<std::size_t>(u)]
                .total;
  }
  s.epoch1_mean_total = first / per_epoch;
  s.final_epoch_mean_total = last / per_epoch;
  s.best_val_total = trainer.best_val();

  // Step log CSV.
  std::string csv = csv_row({"step", "lr", "loss_mse", "loss_prc", "loss_smt",
                             "loss_fld", "loss_add", "total"});
  for (const SslStepLog& r : trainer.step_log())
    csv += csv_row({std::to_string(r.step), fmt_double(r.lr),
                    fmt_double(r.mse), fmt_double(r.prc), fmt_double(r.smt),
                    fmt_double(r.fld), fmt_double(r.add),
                    fmt_double(r.total)});
  write_file_atomic(out_dir / "ssl_log.csv", csv);

  std::string vcsv = csv_row({"epoch", "val_total", "val_mse", "is_best"});
  for (const SslEpochLog& r : trainer.epoch_log())
    vcsv += csv_row({std::to_string(r.epoch), fmt_double(r.val_total),
                     fmt_double(r.val_mse), r.is_best ? "1" : "0"});
  write_file_atomic(out_dir / "ssl_val.csv", vcsv);
  return s;
}

// ---------------------------------------------------------------------------
// TTC model and split
// ---------------------------------------------------------------------------

TtcModel make_ttc_model(const NetConfig& cfg, Rng& rng) {
  TtcModel m;
  m.cfg = cfg;
  m.encoder = make_encoder(cfg, rng);
  m.classifier = make_classifier(2 * cfg.feature_channels, rng);
  return m;
}

std::vector<Parameter> TtcModel::parameters() {
  std::vector<Parameter> out;
  encoder.collect("encoder", out);
  for (Parameter& p : classifier.parameters()) out.push_back(p);
  return out;
}

TtcMode ttc_mode_from_string(const std::string& s) {
  if (s == "scratch") return TtcMode::Scratch;
  if (s == "freeze") return TtcMode::Freeze;
  if (s == "finetune") return TtcMode::Finetune;
  throw std::invalid_argument("unknown ttc mode: " + s);
}

const char* ttc_mode_name(TtcMode m) {
  switch (m) {
    case TtcMode::Scratch:
      return "scratch";
    case TtcMode::Freeze:
      return "freeze";
    case TtcMode::Finetune:
      return "finetune";
  }
  return "?";
}

TtcSplit build_ttc_split(const PhantomDataset& data, int fold,
                         std::uint64_t seed, double horizon) {
  std::vector<int> test_eyes, rest;
  for (std::size_t i = 0; i < data.eyes.size(); ++i) {
    const EyeSeries& e = data.eyes[i];
    if (e.split != "ttc") continue;
    (e.fold == fold ? test_eyes : rest).push_back(static_cast<int>(i));
  }
  if (test_eyes.empty() || rest.empty())
    throw std::runtime_error("ttc: fold " + std::to_string(fold) +
                             " leaves an empty test or train set");

  // 85/15 train/validation split of the remaining eyes.
  Rng split_rng(seed * 1000003ull + static_cast<std::uint64_t>(fold));
  for (std::size_t i = rest.size(); i > 1; --i)
    std::swap(rest[i - 1], rest[static_cast<std::size_t>(
                               split_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  const std::size_t n_val =
      std::max<std::size_t>(1, static_cast<std::size_t>(
                                   std::lround(0.15 * static_cast<double>(rest.size()))));

  TtcSplit split;
  auto add_records = [&](int eye_idx, std::vector<TtcRecord>& dst) {
    const EyeSeries& e = data.eyes[static_cast<std::size_t>(eye_idx)];
    for (std::size_t vi = 0; vi < e.visits.size(); ++vi) {
      const Visit& v = e.visits[vi];
      if (v.t_plus < 0.0) {  // scan after the first conversion visit
        ++split.excluded_post_conversion;
        continue;
      }
      ConversionRecord rec;
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%02zu", vi);
      rec.scan_id = e.eye_id + "/visit_" + buf;
      rec.eye_id = e.eye_id;
      rec.t_minus = v.t_minus;
      rec.t_plus = v.t_plus;
      rec.horizon = horizon;
      if (record_straddles_horizon(rec)) {
        ++split.excluded_straddle;
        continue;
      }
      record_case(rec);  // validates; throws on malformed labels
      dst.push_back(TtcRecord{rec, v.volume, v.roi});
    }
  };
  for (std::size_t i = 0; i < rest.size(); ++i)
    add_records(rest[i], i < n_val ? split.val : split.train);
  for (int i : test_eyes) add_records(i, split.test);
  return split;
}

// ---------------------------------------------------------------------------
// TTC trainer
// ---------------------------------------------------------------------------

TtcTrainer::TtcTrainer(const RunConfig& cfg, const PhantomDataset& data,
                       TtcMode mode, const fs::path& init_checkpoint)
    : cfg_(cfg), data_(data), mode_(mode), data_rng_(0) {
  cfg_.net.h = data.cfg.h;
  cfg_.net.w = data.cfg.w;
  cfg_.net.d = data.cfg.d;
  Rng root(cfg_.seed);
  Rng init_rng = root.fork(20);
  data_rng_ = root.fork(21);
  model_ = make_ttc_model(cfg_.net, init_rng);
  params_ = model_.parameters();
  adam_.cfg.weight_decay = cfg_.ttc.weight_decay;
  split_ = build_ttc_split(data_, cfg_.ttc.fold, cfg_.seed,
                           data_.cfg.horizon_months);
  if (split_.train.empty() || split_.val.empty() || split_.test.empty())
    throw std::runtime_error("ttc: empty split for fold " +
                             std::to_string(cfg_.ttc.fold));

  if (mode_ != TtcMode::Scratch) {
    if (init_checkpoint.empty())
      throw std::runtime_error("checkpoint: --init required for mode " +
                               std::string(ttc_mode_name(mode_)));
    const std::vector<std::string> required =
        mode_ == TtcMode::Freeze
            ? std::vector<std::string>{"encoder."}
            : std::vector<std::string>{"encoder.", "classifier."};
    load_checkpoint_params(init_checkpoint, params_, required);
  }
  if (mode_ == TtcMode::Freeze) {
    for (Parameter& p : params_)
      if (p.name.rfind("encoder.", 0) == 0) p.tensor.set_requires_grad(false);
  }
}

TtcLossBreakdown TtcTrainer::record_loss(const TtcRecord& record,
                                         bool do_augment) {
  Tensor vol = record.volume;
  Tensor roi = record.roi;
  if (do_augment) augment_single(vol, roi, data_rng_, cfg_.augment);
  const FeatureMap f = model_.encoder.forward(vol);
  const ClassifierOutput out =
      classifier_forward(model_.classifier, concat({f.fd, f.fa}));
  const auto grid = cfg_.net.feature_grid();
  const Tensor roi_grid = resample_to(roi, grid[0], grid[1], grid[2]);
  return ttc_total_loss(out, record.rec, roi_grid);
}

void TtcTrainer::run_epoch(const fs::path& out_dir) {
  const int updates = cfg_.ttc.updates_per_epoch;
  const int batch = cfg_.ttc.batch_size;
  for (int u = 0; u < updates; ++u) {
    const double lr = cyclic_lr(u, updates, cfg_.ttc.lr_min, cfg_.ttc.lr_max);
    Tensor cls_acc, slope_acc, mask_acc, total_acc;
    for (int b = 0; b < batch; ++b) {
      const auto idx = static_cast<std::size_t>(data_rng_.uniform_int(
          0, static_cast<std::int64_t>(split_.train.size()) - 1));
      const TtcLossBreakdown lb = record_loss(split_.train[idx], true);
      cls_acc = b == 0 ? lb.cls : add(cls_acc, lb.cls);
      slope_acc = b == 0 ? lb.slope_reg : add(slope_acc, lb.slope_reg);
      mask_acc = b == 0 ? lb.mask_reg : add(mask_acc, lb.mask_reg);
      total_acc = b == 0 ? lb.total : add(total_acc, lb.total);
    }
    const double inv = 1.0 / batch;
    const Tensor loss = mul_scalar(total_acc, inv);
    const double total = loss.value();
    if (!std::isfinite(total))
      throw NanLossError("ttc: non-finite loss at step " +
                         std::to_string(global_step_));
    for (Parameter& p : params_) p.tensor.zero_grad();
    backward(loss);
    adam_.step(params_, lr);
    step_log_.push_back({global_step_, lr, cls_acc.value() * inv,
                         slope_acc.value() * inv, mask_acc.value() * inv,
                         total});
    ++global_step_;
  }
  TtcEpochLog log = validate();
  log.epoch = epoch_;
  const bool best = !has_best_ || log.mean_val_auc > best_metric_;
  if (best) {
    best_metric_ = log.mean_val_auc;
    has_best_ = true;
    if (!out_dir.empty()) save_checkpoint_to(out_dir / "checkpoint");
  }
  log.is_best = best;
  epoch_log_.push_back(log);
  ++epoch_;
}

TtcEpochLog TtcTrainer::validate() {
  TtcEpochLog log;
  std::vector<CdfParams> preds;
  preds.reserve(split_.val.size());
  for (const TtcRecord& r : split_.val) {
    const FeatureMap f = model_.encoder.forward(r.volume);
    const ClassifierOutput out =
        classifier_forward(model_.classifier, concat({f.fd, f.fa}));
    preds.push_back(to_params(out));
  }
  double sum = 0.0;
  int defined = 0;
  for (double t : cfg_.eval.time_points) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t i = 0; i < split_.val.size(); ++i) {
      const auto lab = label_at_horizon(split_.val[i].rec, t);
      if (!lab) continue;
      labels.push_back(*lab);
      scores.push_back(
          cdf_probability(preds[i], t / split_.val[i].rec.horizon));
    }
    const bool both = std::count(labels.begin(), labels.end(), 1) > 0 &&
                      std::count(labels.begin(), labels.end(), 0) > 0;
    if (both) {
      const double auc = roc_auc(scores, labels);
      log.val_auc_per_t.push_back(auc);
      sum += auc;
      ++defined;
    } else {
      log.val_auc_per_t.push_back(kNan);
    }
  }
  log.mean_val_auc = defined > 0 ? sum / defined : 0.0;
  return log;
}

void TtcTrainer::save_checkpoint_to(const fs::path& ckpt_dir) const {
  ordered_json echo;
  echo["stage"] = "ttc";
  echo["mode"] = ttc_mode_name(mode_);
  echo["run_config"] = run_config_to_json(cfg_);
  save_checkpoint(ckpt_dir,
                  std::span<Parameter>(const_cast<Parameter*>(params_.data()),
                                       params_.size()),
                  echo);
}

TtcRunSummary train_ttc(const RunConfig& cfg, const PhantomDataset& data,
                        TtcMode mode, const fs::path& init_ckpt,
                        const fs::path& out_dir) {
  TtcTrainer trainer(cfg, data, mode, init_ckpt);
  for (int e = 0; e < cfg.ttc.epochs; ++e) trainer.run_epoch(out_dir);

  std::string csv = csv_row(
      {"step", "lr", "loss_cls", "loss_a_reg", "loss_mask_reg", "total"});
  for (const TtcStepLog& r : trainer.step_log())
    csv += csv_row({std::to_string(r.step), fmt_double(r.lr),
                    fmt_double(r.cls), fmt_double(r.slope_reg),
                    fmt_double(r.mask_reg), fmt_double(r.total)});
  write_file_atomic(out_dir / "ttc_log.csv", csv);

  std::string vcsv = csv_row({"epoch", "mean_val_auc", "is_best"});
  for (const TtcEpochLog& r : trainer.epoch_log())
    vcsv += csv_row({std::to_string(r.epoch), fmt_double(r.mean_val_auc),
                     r.is_best ? "1" : "0"});
  write_file_atomic(out_dir / "ttc_val.csv", vcsv);

  TtcRunSummary s;
  for (const TtcEpochLog& r : trainer.epoch_log())
    s.best_mean_val_auc = std::max(s.best_mean_val_auc, r.mean_val_auc);
  return s;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

EvalResult eval_from_predictions(const std::vector<TtcRecord>& records,
                                 const std::vector<CdfParams>& params,
                                 const PhantomDataset& data, int fold,
                                 const RunConfig& cfg) {
  if (records.size() != params.size())
    throw std::invalid_argument("eval: records/params length mismatch");
  EvalResult res;
  res.fold = fold;
  res.time_points = cfg.eval.time_points;

  for (std::size_t i = 0; i < records.size(); ++i) {
    ScanPrediction sp;
    sp.rec = records[i].rec;
    sp.params = params[i];
    for (double t : res.time_points)
      sp.p_at.push_back(cdf_probability(params[i], t / sp.rec.horizon));
    sp.risk = risk_score(params[i]);
    sp.group = risk_group(sp.risk);
    res.predictions.push_back(std::move(sp));
  }

  // Per-time-point scores and labels; only time points with both classes
  // enter the threshold search and metric rows.
  std::vector<std::vector<double>> scores_by_t;
  std::vector<std::vector<int>> labels_by_t;
  std::vector<std::size_t> qualified;
  for (std::size_t ti = 0; ti < res.time_points.size(); ++ti) {
    const double t = res.time_points[ti];
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto lab = label_at_horizon(records[i].rec, t);
      if (!lab) continue;
      labels.push_back(*lab);
      scores.push_back(res.predictions[i].p_at[ti]);
    }
    const bool both = std::count(labels.begin(), labels.end(), 1) > 0 &&
                      std::count(labels.begin(), labels.end(), 0) > 0;
    MetricsRow row;
    row.t_months = t;
    row.defined = both;
    if (both) {
      row.auc = roc_auc(scores, labels);
      qualified.push_back(ti);
      scores_by_t.push_back(std::move(scores));
      labels_by_t.push_back(std::move(labels));
    }
    res.rows.push_back(row);
  }
  if (!qualified.empty()) {
    res.threshold = youden_threshold(scores_by_t, labels_by_t);
    res.threshold_defined = true;
    for (std::size_t q = 0; q < qualified.size(); ++q) {
      std::vector<int> pred;
      pred.reserve(scores_by_t[q].size());
      for (double s : scores_by_t[q]) pred.push_back(s >= res.threshold ? 1 : 0);
      MetricsRow& row = res.rows[qualified[q]];
      bool pred_both = std::count(pred.begin(), pred.end(), 1) > 0 &&
                       std::count(pred.begin(), pred.end(), 0) > 0;
      (void)pred_both;
      row.bal_acc = balanced_accuracy(pred, labels_by_t[q]);
    }
  } else {
    for (MetricsRow& row : res.rows) row.defined = false;
  }

  // Per-eye survival samples: group from the earliest included scan's risk.
  struct EyeAgg {
    double first_scan_time = 0.0;
    double risk = 0.0;
    bool seen = false;
  };
  std::map<std::string, EyeAgg> per_eye;
  std::map<std::string, double> scan_time;  // scan_id -> visit time
  for (const EyeSeries& e : data.eyes)
    for (std::size_t vi = 0; vi < e.visits.size(); ++vi) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%02zu", vi);
      scan_time[e.eye_id + "/visit_" + buf] = e.visits[vi].t_months;
    }
  for (const ScanPrediction& sp : res.predictions) {
    const double t = scan_time.at(sp.rec.scan_id);
    auto& agg = per_eye[sp.rec.eye_id];
    if (!agg.seen || t < agg.first_scan_time) {
      agg.seen = true;
      agg.first_scan_time = t;
      agg.risk = sp.risk;
    }
  }
  std::vector<std::vector<SurvivalSample>> groups(3);
  for (const EyeSeries& e : data.eyes) {
    const auto it = per_eye.find(e.eye_id);
    if (it == per_eye.end()) continue;
    const bool event = e.conversion_time_true <= e.visits.back().t_months;
    const double time =
        event ? e.conversion_time_true : e.visits.back().t_months;
    if (!(time > 0.0)) continue;
    SurvivalSample s;
    s.time = time;
    s.event = event;
    s.group = static_cast<int>(risk_group(it->second.risk));
    groups[static_cast<std::size_t>(s.group)].push_back(s);
  }
  for (int g = 0; g < 3; ++g) {
    if (groups[static_cast<std::size_t>(g)].empty()) continue;
    const StepFunction sf = kaplan_meier(groups[static_cast<std::size_t>(g)]);
    res.km.push_back({0.0, 1.0, g});
    for (std::size_t i = 0; i < sf.times.size(); ++i)
      res.km.push_back({sf.times[i], sf.values[i], g});
  }
  std::vector<std::vector<SurvivalSample>> nonempty;
  for (auto& g : groups)
    if (!g.empty()) nonempty.push_back(g);
  if (nonempty.size() >= 2) {
    res.logrank = log_rank_test(nonempty);
    res.logrank_defined = true;
  }
  return res;
}

EvalResult evaluate_fold(const TtcModel& model, const PhantomDataset& data,
                         int fold, const RunConfig& cfg) {
  const TtcSplit split =
      build_ttc_split(data, fold, cfg.seed, data.cfg.horizon_months);
  std::vector<CdfParams> preds;
  preds.reserve(split.test.size());
  for (const TtcRecord& r : split.test) {
    const FeatureMap f = model.encoder.forward(r.volume);
    const ClassifierOutput out =
        classifier_forward(model.classifier, concat({f.fd, f.fa}));
    preds.push_back(to_params(out));
  }
  return eval_from_predictions(split.test, preds, data, fold, cfg);
}

void write_eval_outputs(const EvalResult& result, const fs::path& out_dir) {
  std::vector<std::string> header{"scan_id", "a", "b"};
  for (double t : result.time_points)
    header.push_back("p_" + fmt_double(t) + "m");
  header.push_back("r");
  header.push_back("risk_group");
  std::string pcsv = csv_row(header);
  for (const ScanPrediction& sp : result.predictions) {
    std::vector<std::string> row{sp.rec.scan_id, fmt_double(sp.params.a),
                                 fmt_double(sp.params.b)};
    for (double p : sp.p_at) row.push_back(fmt_double(p));
    row.push_back(fmt_double(sp.risk));
    row.push_back(risk_group_name(sp.group));
    pcsv += csv_row(row);
  }
  write_file_atomic(out_dir / "predictions.csv", pcsv);

  std::string mcsv = csv_row({"fold", "t_months", "auc", "bal_acc", "threshold"});
  for (const MetricsRow& row : result.rows) {
    mcsv += csv_row({std::to_string(result.fold), fmt_double(row.t_months),
                     row.defined ? fmt_double(row.auc) : "null",
                     row.defined ? fmt_double(row.bal_acc) : "null",
                     result.threshold_defined ? fmt_double(result.threshold)
                                              : "null"});
  }
  write_file_atomic(out_dir / "metrics.csv", mcsv);

  std::string kcsv = csv_row({"time", "survival", "group"});
  for (const KmCurvePoint& p : result.km)
    kcsv += csv_row({fmt_double(p.time), fmt_double(p.survival),
                     std::to_string(p.group)});
  write_file_atomic(out_dir / "km.csv", kcsv);

  std::string lcsv = csv_row({"chi2", "p_value", "df"});
  if (result.logrank_defined)
    lcsv += csv_row({fmt_double(result.logrank.chi2),
                     fmt_double(result.logrank.p),
                     std::to_string(result.logrank.df)});
  else
    lcsv += csv_row({"null", "null", "null"});
  write_file_atomic(out_dir / "logrank.csv", lcsv);
}

}  // namespace morphtrack
