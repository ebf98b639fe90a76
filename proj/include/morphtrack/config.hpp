#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "json.hpp"
#include "morphtrack/morphnet.hpp"
#include "morphtrack/phantom.hpp"

namespace morphtrack {

struct SslTrainConfig {
  int epochs = 5;
  int updates_per_epoch = 200;
  double lr_min = 1e-6, lr_max = 1e-4;
  double weight_decay = 1e-5;
  double ema_momentum = 0.99;
  int val_pairs = 12;
};

struct TtcTrainConfig {
  int epochs = 8;
  int updates_per_epoch = 100;
  int batch_size = 8;
  double lr_min = 1e-5, lr_max = 1e-4;
  double weight_decay = 1e-2;
  int fold = 0;
};

struct EvalConfig {
  std::vector<double> time_points{0.0, 6.0, 12.0, 18.0};
};

struct RunConfig {
  std::uint64_t seed = 20240501;
  PhantomConfig data;
  NetConfig net;
  AugmentConfig augment;
  SslTrainConfig ssl;
  TtcTrainConfig ttc;
  EvalConfig eval;
};

/// Applies the JSON sections {seed,data,net,ssl,ttc,eval} over the defaults;
/// unknown keys are rejected. Augmentation lives under data.augment.
RunConfig run_config_from_json(const nlohmann::ordered_json& j);

/// Parses a config file; parse failures are reported with line and column.
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::ordered_json run_config_to_json(const RunConfig& cfg);

/// Thrown on malformed config files; the CLI maps it to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace morphtrack
