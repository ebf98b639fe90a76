#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "morphtrack/trainer.hpp"
#include "test_util.hpp"

using namespace morphtrack;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run_config() {
  RunConfig cfg;
  cfg.seed = 4242;
  cfg.data.h = 16;
  cfg.data.w = 16;
  cfg.data.d = 4;
  cfg.data.eyes = 10;
  cfg.data.ssl_eyes = 4;
  cfg.data.folds = 2;
  // Enough follow-up that censored scans can clear the 18-month horizon.
  cfg.data.min_visits = 6;
  cfg.data.max_visits = 8;
  cfg.data.converter_fraction = 0.8;
  cfg.data.roi_top = 3;
  cfg.data.roi_bottom = 12;
  cfg.net.stem_channels = 4;
  cfg.net.feature_channels = 8;
  cfg.ssl.epochs = 1;
  cfg.ssl.updates_per_epoch = 4;
  cfg.ssl.val_pairs = 3;
  cfg.ttc.epochs = 1;
  cfg.ttc.updates_per_epoch = 3;
  cfg.ttc.batch_size = 2;
  cfg.ttc.fold = 0;
  return cfg;
}

std::vector<double> snapshot(std::span<Parameter> params) {
  std::vector<double> out;
  for (const Parameter& p : params)
    out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

}  // namespace

TEST_CASE("adam: first step of a unit-gradient scalar moves by about -lr") {
  Parameter p{"p", Tensor::scalar(1.0, true), false};
  backward(sum_all(p.tensor));  // gradient 1
  Adam adam;
  adam.step(std::span<Parameter>(&p, 1), 0.01);
  // Bias-corrected mhat/sqrt(vhat) = 1, so the move is lr/(1+eps).
  CHECK(p.tensor.value() ==
        doctest::Approx(1.0 - 0.01 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam: zero gradients leave values; weight decay shrinks them") {
  Parameter p{"p", Tensor::scalar(2.0, true), false};
  backward(mul_scalar(sum_all(p.tensor), 0.0));  // explicit zero gradient
  REQUIRE(p.tensor.has_grad());
  Adam plain;
  plain.step(std::span<Parameter>(&p, 1), 0.1);
  CHECK(p.tensor.value() == 2.0);

  Adam decay;
  decay.cfg.weight_decay = 0.5;
  p.tensor.zero_grad();
  backward(mul_scalar(sum_all(p.tensor), 0.0));
  decay.step(std::span<Parameter>(&p, 1), 0.1);
  CHECK(p.tensor.value() == doctest::Approx(2.0 * (1.0 - 0.1 * 0.5)));
}

TEST_CASE("adam: parameters without gradients stay byte-identical") {
  Parameter frozen{"f", Tensor::scalar(3.0, true), false};
  Parameter live{"l", Tensor::scalar(1.0, true), false};
  frozen.tensor.set_requires_grad(false);
  backward(sum_all(live.tensor));
  Adam adam;
  adam.cfg.weight_decay = 0.5;
  std::vector<Parameter> ps{frozen, live};
  adam.step(ps, 0.1);
  CHECK(frozen.tensor.value() == 3.0);
  CHECK(live.tensor.value() < 1.0);
}

TEST_CASE("cyclic_lr: triangular endpoints and midpoint") {
  CHECK(cyclic_lr(0, 100, 1e-6, 1e-4) == doctest::Approx(1e-6));
  CHECK(cyclic_lr(50, 100, 1e-6, 1e-4) == doctest::Approx(1e-4));
  const double last = cyclic_lr(99, 100, 1e-6, 1e-4);
  const double increment = (1e-4 - 1e-6) * 2.0 / 100.0;
  CHECK(last <= 1e-6 + increment + 1e-18);
  CHECK_THROWS_AS(cyclic_lr(100, 100, 0, 1), std::invalid_argument);
}

TEST_CASE("ssl trainer: zero learning rate leaves parameters bit-identical") {
  RunConfig cfg = tiny_run_config();
  cfg.ssl.lr_min = 0.0;
  cfg.ssl.lr_max = 0.0;
  PhantomDataset ds = generate_dataset(cfg.data, cfg.seed);
  SslTrainer trainer(cfg, ds);
  const auto before = snapshot(trainer.params());
  trainer.run_epoch(fs::path());
  const auto after = snapshot(trainer.params());
  REQUIRE(before.size() == after.size());
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);
}

TEST_CASE("ssl trainer: deterministic given config and seed") {
  RunConfig cfg = tiny_run_config();
  PhantomDataset ds = generate_dataset(cfg.data, cfg.seed);
  SslTrainer a(cfg, ds), b(cfg, ds);
  a.run_epoch(fs::path());
  b.run_epoch(fs::path());
  const auto pa = snapshot(a.params());
  const auto pb = snapshot(b.params());
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == pb[i]);
  REQUIRE(a.step_log().size() == b.step_log().size());
  for (std::size_t i = 0; i < a.step_log().size(); ++i)
    CHECK(a.step_log()[i].total == b.step_log()[i].total);
}

TEST_CASE("ssl trainer: state save/load resumes the trajectory bit-exactly") {
  RunConfig cfg = tiny_run_config();
  cfg.ssl.epochs = 2;
  PhantomDataset ds = generate_dataset(cfg.data, cfg.seed);

  SslTrainer full(cfg, ds);
  full.run_epoch(fs::path());
  full.run_epoch(fs::path());

  SslTrainer part(cfg, ds);
  part.run_epoch(fs::path());
  const fs::path dir = fs::temp_directory_path() / "morphtrack_state_test";
  fs::remove_all(dir);
  part.save_state(dir);

  SslTrainer resumed(cfg, ds);
  resumed.load_state(dir);
  resumed.run_epoch(fs::path());

  const auto pf = snapshot(full.params());
  const auto pr = snapshot(resumed.params());
  REQUIRE(pf.size() == pr.size());
  for (std::size_t i = 0; i < pf.size(); ++i) CHECK(pf[i] == pr[i]);

  // The post-resume loss trajectory matches the uninterrupted run.
  const auto& sf = full.step_log();
  const auto& sr = resumed.step_log();
  REQUIRE(sr.size() == static_cast<std::size_t>(cfg.ssl.updates_per_epoch));
  for (std::size_t i = 0; i < sr.size(); ++i)
    CHECK(sr[i].total ==
          sf[sf.size() - sr.size() + i].total);
  fs::remove_all(dir);
}

TEST_CASE("checkpoints round-trip bitwise and reject mismatched shapes") {
  RunConfig cfg = tiny_run_config();
  Rng rng(1);
  MorphModel model = make_morph_model(cfg.net, rng);
  std::vector<Parameter> params = model.parameters();
  const fs::path dir = fs::temp_directory_path() / "morphtrack_ckpt_test";
  fs::remove_all(dir);
  nlohmann::ordered_json echo;
  echo["stage"] = "ssl";
  save_checkpoint(dir, params, echo);
  REQUIRE(is_checkpoint_dir(dir));

  // Perturb, reload, compare bitwise.
  std::vector<double> orig = snapshot(params);
  for (Parameter& p : params)
    for (double& v : p.tensor.mutable_data()) v += 1.0;
  load_checkpoint_params(dir, params, {""});
  std::vector<double> back = snapshot(params);
  REQUIRE(orig.size() == back.size());
  for (std::size_t i = 0; i < orig.size(); ++i) CHECK(orig[i] == back[i]);

  // A model with different widths must be refused.
  NetConfig other = cfg.net;
  other.feature_channels = 4;
  Rng rng2(2);
  MorphModel incompatible = make_morph_model(other, rng2);
  std::vector<Parameter> bad = incompatible.parameters();
  CHECK_THROWS_WITH_AS(load_checkpoint_params(dir, bad, {""}),
                       doctest::Contains("shape mismatch"),
                       std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("ttc split: straddlers and post-conversion scans are rejected") {
  RunConfig cfg = tiny_run_config();
  PhantomDataset ds = generate_dataset(cfg.data, cfg.seed);
  TtcSplit split = build_ttc_split(ds, 0, cfg.seed, 18.0);
  CHECK(!split.test.empty());
  CHECK(!split.train.empty());
  for (const auto& part : {split.train, split.val, split.test})
    for (const TtcRecord& r : part) {
      CHECK(r.rec.t_plus >= 0.0);
      CHECK_FALSE(record_straddles_horizon(r.rec));
      record_case(r.rec);  // must not throw
    }
  // Determinism of the split.
  TtcSplit split2 = build_ttc_split(ds, 0, cfg.seed, 18.0);
  REQUIRE(split.train.size() == split2.train.size());
  for (std::size_t i = 0; i < split.train.size(); ++i)
    CHECK(split.train[i].rec.scan_id == split2.train[i].rec.scan_id);
}

TEST_CASE("ttc trainer: freeze keeps the encoder byte-identical") {
  RunConfig cfg = tiny_run_config();
  PhantomDataset ds = generate_dataset(cfg.data, cfg.seed);

  // A quick SSL checkpoint to initialize from.
  const fs::path ssl_dir = fs::temp_directory_path() / "morphtrack_ssl_ckpt";
  fs::remove_all(ssl_dir);
  SslTrainer ssl(cfg, ds);
  ssl.save_checkpoint_to(ssl_dir / "checkpoint");

  TtcTrainer trainer(cfg, ds, TtcMode::Freeze, ssl_dir / "checkpoint");
  std::vector<double> before, after;
  for (const Parameter& p : trainer.params())
    if (p.name.rfind("encoder.", 0) == 0)
      before.insert(before.end(), p.tensor.data().begin(),
                    p.tensor.data().end());
  trainer.run_epoch(fs::path());
  for (const Parameter& p : trainer.params())
    if (p.name.rfind("encoder.", 0) == 0)
      after.insert(after.end(), p.tensor.data().begin(), p.tensor.data().end());
  REQUIRE(before.size() == after.size());
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);

  // Classifier must have moved.
  bool classifier_moved = false;
  Rng probe_rng(cfg.seed);
  Rng init_rng = Rng(cfg.seed).fork(20);
  (void)probe_rng;
  (void)init_rng;
  for (const Parameter& p : trainer.params())
    if (p.name.rfind("classifier.", 0) == 0)
      for (double g : p.tensor.data())
        if (std::fabs(g) > 0.0) classifier_moved = true;
  CHECK(classifier_moved);
  fs::remove_all(ssl_dir);
}

TEST_CASE("ttc trainer requires --init for freeze and finetune") {
  RunConfig cfg = tiny_run_config();
  PhantomDataset ds = generate_dataset(cfg.data, cfg.seed);
  CHECK_THROWS_WITH_AS(TtcTrainer(cfg, ds, TtcMode::Freeze, fs::path()),
                       doctest::Contains("checkpoint"), std::runtime_error);
}

TEST_CASE("evaluation: oracle predictions reach AUC 1, constants stay at 0.5") {
  RunConfig cfg = tiny_run_config();
  cfg.data.converter_fraction = 0.9;
  PhantomDataset ds = generate_dataset(cfg.data, cfg.seed + 1);
  TtcSplit split = build_ttc_split(ds, 0, cfg.seed, 18.0);
  REQUIRE(!split.test.empty());

  // Oracle: b equals the true (normalized) conversion time.
  std::vector<CdfParams> oracle;
  std::map<std::string, double> conv_time;
  for (const EyeSeries& e : ds.eyes) conv_time[e.eye_id] = e.conversion_time_true;
  std::map<std::string, double> scan_time;
  for (const EyeSeries& e : ds.eyes)
    for (std::size_t vi = 0; vi < e.visits.size(); ++vi) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%02zu", vi);
      scan_time[e.eye_id + "/visit_" + buf] = e.visits[vi].t_months;
    }
  for (const TtcRecord& r : split.test) {
    const double remaining =
        std::isfinite(conv_time[r.rec.eye_id])
            ? std::max(1e-3, conv_time[r.rec.eye_id] - scan_time[r.rec.scan_id])
            : 100.0;
    oracle.push_back(CdfParams{0.01, remaining / 18.0});
  }
  EvalResult res = eval_from_predictions(split.test, oracle, ds, 0, cfg);
  for (const MetricsRow& row : res.rows)
    if (row.defined) CHECK(row.auc == doctest::Approx(1.0));

  // Constant predictor: AUC 0.5 wherever defined.
  std::vector<CdfParams> flat(split.test.size(), CdfParams{0.5, 1.0});
  EvalResult res2 = eval_from_predictions(split.test, flat, ds, 0, cfg);
  for (const MetricsRow& row : res2.rows)
    if (row.defined) CHECK(row.auc == doctest::Approx(0.5));

  // Bookkeeping: one metrics row per configured time point.
  CHECK(res.rows.size() == cfg.eval.time_points.size());

  // Output CSVs land on disk.
  const fs::path out = fs::temp_directory_path() / "morphtrack_eval_test";
  fs::remove_all(out);
  write_eval_outputs(res, out);
  CHECK(fs::exists(out / "predictions.csv"));
  CHECK(fs::exists(out / "metrics.csv"));
  CHECK(fs::exists(out / "km.csv"));
  CHECK(fs::exists(out / "logrank.csv"));
  fs::remove_all(out);
}
