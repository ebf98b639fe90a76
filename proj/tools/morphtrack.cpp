// morphtrack: phantom generation, Morph-SSL training, time-to-conversion
// training/evaluation, and feature-space interpolation, in reproducible runs.
//
// Exit codes: 0 success, 2 config error, 3 IO error, 4 checkpoint error,
// 5 domain precondition violated.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "morphtrack/checkpoint.hpp"
#include "morphtrack/config.hpp"
#include "morphtrack/io.hpp"
#include "morphtrack/phantom.hpp"
#include "morphtrack/trainer.hpp"
#include "morphtrack/version.hpp"
#include "morphtrack/warp.hpp"

namespace fs = std::filesystem;
using morphtrack::RunConfig;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitCheckpoint = 4;
constexpr int kExitDomain = 5;

struct CliError : std::runtime_error {
  int code;
  CliError(int code_, const std::string& msg)
      : std::runtime_error(msg), code(code_) {}
};

RunConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return RunConfig{};
  try {
    return morphtrack::load_run_config(path);
  } catch (const morphtrack::ConfigError& e) {
    throw CliError(kExitConfig, e.what());
  }
}

void write_run_manifest(const fs::path& out_dir, const std::string& command,
                        const RunConfig& cfg,
                        const std::vector<std::string>& artifacts) {
  ordered_json j;
  j["tool"] = "morphtrack";
  j["version"] = morphtrack::kVersion;
  j["code_hash"] = morphtrack::code_hash();
  j["command"] = command;
  j["seed"] = cfg.seed;
  j["config"] = morphtrack::run_config_to_json(cfg);
  {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
    j["timestamp"] = buf;
  }
  j["artifacts"] = artifacts;
  morphtrack::write_file_atomic(out_dir / "run_manifest.json",
                                j.dump(2) + "\n");
}

RunConfig config_from_checkpoint(const fs::path& ckpt,
                                 const std::string& expected_stage) {
  ordered_json manifest;
  try {
    manifest = morphtrack::load_checkpoint_manifest(ckpt);
  } catch (const std::exception& e) {
    throw CliError(kExitCheckpoint, e.what());
  }
  const auto& echo = manifest.at("config");
  if (!expected_stage.empty() &&
      echo.at("stage").get<std::string>() != expected_stage)
    throw CliError(kExitCheckpoint,
                   "checkpoint: expected a " + expected_stage +
                       " checkpoint, found stage \"" +
                       echo.at("stage").get<std::string>() + "\"");
  return morphtrack::run_config_from_json(echo.at("run_config"));
}

morphtrack::PhantomDataset load_dataset_or_die(const fs::path& dir) {
  if (!fs::exists(dir / "index.json"))
    throw CliError(kExitIo, "dataset: missing " + (dir / "index.json").string());
  try {
    return morphtrack::load_dataset(dir);
  } catch (const std::exception& e) {
    throw CliError(kExitIo, e.what());
  }
}

int cmd_gen_data(const std::string& config_path, const std::string& out,
                 std::uint64_t seed, bool seed_given) {
  RunConfig cfg = load_config_or_default(config_path);
  if (seed_given) cfg.seed = seed;
  try {
    const morphtrack::PhantomDataset ds =
        morphtrack::generate_dataset(cfg.data, cfg.seed);
    morphtrack::write_dataset(ds, out);
    write_run_manifest(out, "gen-data", cfg, {"index.json"});
  } catch (const std::invalid_argument& e) {
    throw CliError(kExitConfig, e.what());
  } catch (const fs::filesystem_error& e) {
    throw CliError(kExitIo, e.what());
  }
  std::printf("dataset written to %s\n", out.c_str());
  return 0;
}

int cmd_train(const std::string& stage, const std::string& mode,
              const std::string& data_dir, const std::string& out,
              const std::string& init_ckpt, const std::string& config_path) {
  RunConfig cfg = load_config_or_default(config_path);
  const morphtrack::PhantomDataset ds = load_dataset_or_die(data_dir);

  if (stage == "ssl") {
    const auto summary = morphtrack::train_ssl(cfg, ds, out);
    write_run_manifest(out, "train --stage ssl", cfg,
                       {"checkpoint", "ssl_log.csv", "ssl_val.csv"});
    std::printf("ssl training done: epoch-1 mean %.6g, final mean %.6g, best "
                "val %.6g\n",
                summary.epoch1_mean_total, summary.final_epoch_mean_total,
                summary.best_val_total);
    return 0;
  }
  // stage == "ttc"
  morphtrack::TtcMode m;
  try {
    m = morphtrack::ttc_mode_from_string(mode);
  } catch (const std::exception& e) {
    throw CliError(kExitConfig, e.what());
  }
  if (m != morphtrack::TtcMode::Scratch) {
    if (init_ckpt.empty())
      throw CliError(kExitCheckpoint,
                     "checkpoint: --init is required for ttc mode " + mode);
    if (!morphtrack::is_checkpoint_dir(init_ckpt))
      throw CliError(kExitCheckpoint,
                     "checkpoint: " + init_ckpt + " is not a checkpoint");
  }
  try {
    const auto summary = morphtrack::train_ttc(cfg, ds, m, init_ckpt, out);
    write_run_manifest(out, "train --stage ttc --mode " + mode, cfg,
                       {"checkpoint", "ttc_log.csv", "ttc_val.csv"});
    std::printf("ttc training done: best mean validation AUC %.4f\n",
                summary.best_mean_val_auc);
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    if (msg.rfind("checkpoint:", 0) == 0) throw CliError(kExitCheckpoint, msg);
    throw;
  }
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir,
             const std::string& out, const std::string& config_path) {
  RunConfig cfg = config_from_checkpoint(ckpt, "ttc");
  if (!config_path.empty()) cfg = load_config_or_default(config_path);
  const morphtrack::PhantomDataset ds = load_dataset_or_die(data_dir);
  cfg.net.h = ds.cfg.h;
  cfg.net.w = ds.cfg.w;
  cfg.net.d = ds.cfg.d;

  morphtrack::Rng dummy(0);
  morphtrack::TtcModel model = morphtrack::make_ttc_model(cfg.net, dummy);
  std::vector<morphtrack::Parameter> params = model.parameters();
  try {
    morphtrack::load_checkpoint_params(ckpt, params,
                                       {"encoder.", "classifier."});
  } catch (const std::exception& e) {
    throw CliError(kExitCheckpoint, e.what());
  }
  const morphtrack::EvalResult result =
      morphtrack::evaluate_fold(model, ds, cfg.ttc.fold, cfg);
  morphtrack::write_eval_outputs(result, out);
  write_run_manifest(out, "eval", cfg,
                     {"predictions.csv", "metrics.csv", "km.csv",
                      "logrank.csv"});
  std::printf("evaluated fold %d: %zu test scans\n", result.fold,
              result.predictions.size());
  return 0;
}

int cmd_interpolate(const std::string& ckpt, const std::string& data_dir,
                    const std::string& eye_id, int visit_a, int visit_b,
                    int steps, const std::string& out, bool dump_volumes) {
  RunConfig cfg = config_from_checkpoint(ckpt, "ssl");
  const morphtrack::PhantomDataset ds = load_dataset_or_die(data_dir);
  cfg.net.h = ds.cfg.h;
  cfg.net.w = ds.cfg.w;
  cfg.net.d = ds.cfg.d;

  const morphtrack::EyeSeries* eye = nullptr;
  for (const auto& e : ds.eyes)
    if (e.eye_id == eye_id) eye = &e;
  if (!eye) throw CliError(kExitIo, "interpolate: unknown eye " + eye_id);
  const int n = static_cast<int>(eye->visits.size());
  if (visit_a < 0 || visit_b < 0 || visit_a >= n || visit_b >= n ||
      visit_a >= visit_b)
    throw CliError(kExitDomain, "interpolate: invalid visit indices");
  const double gap = eye->visits[static_cast<std::size_t>(visit_b)].t_months -
                     eye->visits[static_cast<std::size_t>(visit_a)].t_months;
  if (gap > ds.cfg.pair_window_months)
    throw CliError(kExitDomain,
                   "interpolate: visits are " + morphtrack::fmt_double(gap) +
                       " months apart, beyond the pairing window of " +
                       morphtrack::fmt_double(ds.cfg.pair_window_months));
  if (steps < 1) throw CliError(kExitDomain, "interpolate: steps must be >= 1");

  morphtrack::Rng dummy(0);
  morphtrack::MorphModel model = morphtrack::make_morph_model(cfg.net, dummy);
  std::vector<morphtrack::Parameter> params = model.parameters();
  try {
    morphtrack::load_checkpoint_params(ckpt, params, {""});
  } catch (const std::exception& e) {
    throw CliError(kExitCheckpoint, e.what());
  }

  const morphtrack::Tensor vol_a =
      eye->visits[static_cast<std::size_t>(visit_a)].volume;
  const morphtrack::Tensor vol_b =
      eye->visits[static_cast<std::size_t>(visit_b)].volume;
  const morphtrack::FeatureMap f_a = model.encoder.forward(vol_a);
  const morphtrack::FeatureMap f_b = model.encoder.forward(vol_b);

  fs::create_directories(out);
  std::vector<std::string> artifacts;
  const int central = cfg.net.d / 2;
  for (int k = 0; k <= steps; ++k) {
    const double rho = static_cast<double>(k) / steps;
    const morphtrack::FeatureMap f_rho =
        morphtrack::interpolate_features(f_a, f_b, rho);
    const morphtrack::Tensor vol =
        morphtrack::generate_intermediate(model, vol_a, f_a, f_rho);
    char name[32];
    std::snprintf(name, sizeof(name), "slice_r%03d.pgm",
                  static_cast<int>(std::lround(rho * 100.0)));
    morphtrack::write_file_atomic(fs::path(out) / name,
                                  morphtrack::pgm_from_slice(vol, central));
    artifacts.push_back(name);
    if (dump_volumes) {
      char vname[32];
      std::snprintf(vname, sizeof(vname), "volume_r%03d.vol",
                    static_cast<int>(std::lround(rho * 100.0)));
      morphtrack::write_volume(fs::path(out) / vname, vol);
      artifacts.push_back(vname);
    }
  }
  write_run_manifest(out, "interpolate", cfg, artifacts);
  std::printf("interpolation written to %s (%d frames)\n", out.c_str(),
              steps + 1);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"morphtrack: longitudinal morphing SSL and time-to-conversion "
               "modeling on synthetic retinal phantoms"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir, stage, mode = "scratch";
  std::string init_ckpt, ckpt, eye_id;
  std::uint64_t seed = 0;
  bool seed_given = false;
  int visit_a = 0, visit_b = 1, steps = 4;
  bool dump_volumes = false;

  auto* gen = app.add_subcommand("gen-data", "generate a phantom dataset");
  gen->add_option("--config", config_path, "JSON config file");
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--seed", seed, "seed override")->each([&](const std::string&) {
    seed_given = true;
  });

  auto* train = app.add_subcommand("train", "train a stage");
  train->add_option("--stage", stage, "ssl | ttc")
      ->required()
      ->check(CLI::IsMember({"ssl", "ttc"}));
  train->add_option("--mode", mode, "scratch | freeze | finetune (ttc only)")
      ->check(CLI::IsMember({"scratch", "freeze", "finetune"}));
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--init", init_ckpt, "initial checkpoint");
  train->add_option("--config", config_path, "JSON config file");

  auto* eval = app.add_subcommand("eval", "evaluate a ttc checkpoint");
  eval->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--out", out_dir, "output directory")->required();
  eval->add_option("--config", config_path, "JSON config override");

  auto* interp = app.add_subcommand(
      "interpolate", "generate intermediate scans between two visits");
  interp->add_option("--ckpt", ckpt, "ssl checkpoint directory")->required();
  interp->add_option("--data", data_dir, "dataset directory")->required();
  interp->add_option("--eye", eye_id, "eye id")->required();
  interp->add_option("--visit-a", visit_a, "first visit index")->required();
  interp->add_option("--visit-b", visit_b, "second visit index")->required();
  interp->add_option("--steps", steps, "interpolation steps (frames-1)");
  interp->add_option("--out", out_dir, "output directory")->required();
  interp->add_flag("--dump-volumes", dump_volumes, "also write raw volumes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out_dir, seed, seed_given);
    if (train->parsed())
      return cmd_train(stage, mode, data_dir, out_dir, init_ckpt, config_path);
    if (eval->parsed()) return cmd_eval(ckpt, data_dir, out_dir, config_path);
    if (interp->parsed())
      return cmd_interpolate(ckpt, data_dir, eye_id, visit_a, visit_b, steps,
                             out_dir, dump_volumes);
  } catch (const CliError& e) {
    std::fprintf(stderr, "morphtrack: %s\n", e.what());
    return e.code;
  } catch (const morphtrack::ConfigError& e) {
    std::fprintf(stderr, "morphtrack: %s\n", e.what());
    return kExitConfig;
  } catch (const morphtrack::NanLossError& e) {
    std::fprintf(stderr, "morphtrack: training diverged: %s\n", e.what());
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "morphtrack: %s\n", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "morphtrack: %s\n", e.what());
    return 1;
  }
  return 0;
}
