#include "morphtrack/config.hpp"

#include <set>
#include <string>

#include "morphtrack/io.hpp"

namespace morphtrack {

using ordered_json = nlohmann::ordered_json;

namespace {

void reject_unknown(const ordered_json& j, const std::set<std::string>& known,
                    const std::string& where) {
  for (const auto& [key, value] : j.items())
    if (!known.count(key))
      throw ConfigError("config: unknown key \"" + key + "\" in " + where);
}

template <class T>
void get_if(const ordered_json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_data(const ordered_json& j, PhantomConfig& c, AugmentConfig& a) {
  reject_unknown(
      j,
      {"shape", "eyes", "ssl_eyes", "ssl_val_fraction", "folds", "min_visits",
       "max_visits", "mean_visit_interval", "visit_interval_jitter",
       "min_visit_interval", "noise_sigma", "texture_amplitude",
       "texture_modes", "deform_amplitude", "deform_modes", "lesions_min",
       "lesions_max", "conversion_threshold", "converter_fraction",
       "growth_scale", "roi_top", "roi_bottom", "pair_window_months",
       "horizon_months", "augment"},
      "data");
  if (j.contains("shape")) {
    const auto& s = j.at("shape");
    if (!s.is_array() || s.size() != 3)
      throw ConfigError("config: data.shape must be [H,W,D]");
    c.h = s.at(0);
    c.w = s.at(1);
    c.d = s.at(2);
  }
  get_if(j, "eyes", c.eyes);
  get_if(j, "ssl_eyes", c.ssl_eyes);
  get_if(j, "ssl_val_fraction", c.ssl_val_fraction);
  get_if(j, "folds", c.folds);
  get_if(j, "min_visits", c.min_visits);
  get_if(j, "max_visits", c.max_visits);
  get_if(j, "mean_visit_interval", c.mean_visit_interval);
  get_if(j, "visit_interval_jitter", c.visit_interval_jitter);
  get_if(j, "min_visit_interval", c.min_visit_interval);
  get_if(j, "noise_sigma", c.noise_sigma);
  get_if(j, "texture_amplitude", c.texture_amplitude);
  get_if(j, "texture_modes", c.texture_modes);
  get_if(j, "deform_amplitude", c.deform_amplitude);
  get_if(j, "deform_modes", c.deform_modes);
  get_if(j, "lesions_min", c.lesions_min);
  get_if(j, "lesions_max", c.lesions_max);
  get_if(j, "conversion_threshold", c.conversion_threshold);
  get_if(j, "converter_fraction", c.converter_fraction);
  get_if(j, "growth_scale", c.growth_scale);
  get_if(j, "roi_top", c.roi_top);
  get_if(j, "roi_bottom", c.roi_bottom);
  get_if(j, "pair_window_months", c.pair_window_months);
  get_if(j, "horizon_months", c.horizon_months);
  if (j.contains("augment")) {
    const auto& ja = j.at("augment");
    reject_unknown(
        ja, {"max_translate_frac", "flip_prob", "blur_sigma_max", "noise_sigma"},
        "data.augment");
    get_if(ja, "max_translate_frac", a.max_translate_frac);
    get_if(ja, "flip_prob", a.flip_prob);
    get_if(ja, "blur_sigma_max", a.blur_sigma_max);
    get_if(ja, "noise_sigma", a.noise_sigma);
  }
}

}  // namespace

RunConfig run_config_from_json(const ordered_json& j) {
  RunConfig cfg;
  reject_unknown(j, {"seed", "data", "net", "ssl", "ttc", "eval"}, "config root");
  get_if(j, "seed", cfg.seed);
  if (j.contains("data")) parse_data(j.at("data"), cfg.data, cfg.augment);
  if (j.contains("net")) {
    const auto& jn = j.at("net");
    reject_unknown(jn, {"stem_channels", "feature_channels", "ln_eps"}, "net");
    get_if(jn, "stem_channels", cfg.net.stem_channels);
    get_if(jn, "feature_channels", cfg.net.feature_channels);
    get_if(jn, "ln_eps", cfg.net.ln_eps);
  }
  if (j.contains("ssl")) {
    const auto& js = j.at("ssl");
    reject_unknown(js,
                   {"epochs", "updates_per_epoch", "lr_min", "lr_max",
                    "weight_decay", "ema_momentum", "val_pairs"},
                   "ssl");
    get_if(js, "epochs", cfg.ssl.epochs);
    get_if(js, "updates_per_epoch", cfg.ssl.updates_per_epoch);
    get_if(js, "lr_min", cfg.ssl.lr_min);
    get_if(js, "lr_max", cfg.ssl.lr_max);
    get_if(js, "weight_decay", cfg.ssl.weight_decay);
    get_if(js, "ema_momentum", cfg.ssl.ema_momentum);
    get_if(js, "val_pairs", cfg.ssl.val_pairs);
  }
  if (j.contains("ttc")) {
    const auto& jt = j.at("ttc");
    reject_unknown(jt,
                   {"epochs", "updates_per_epoch", "batch_size", "lr_min",
                    "lr_max", "weight_decay", "fold"},
                   "ttc");
    get_if(jt, "epochs", cfg.ttc.epochs);
    get_if(jt, "updates_per_epoch", cfg.ttc.updates_per_epoch);
    get_if(jt, "batch_size", cfg.ttc.batch_size);
    get_if(jt, "lr_min", cfg.ttc.lr_min);
    get_if(jt, "lr_max", cfg.ttc.lr_max);
    get_if(jt, "weight_decay", cfg.ttc.weight_decay);
    get_if(jt, "fold", cfg.ttc.fold);
  }
  if (j.contains("eval")) {
    const auto& je = j.at("eval");
    reject_unknown(je, {"time_points"}, "eval");
    get_if(je, "time_points", cfg.eval.time_points);
  }
  // The network must match the data geometry.
  cfg.net.h = cfg.data.h;
  cfg.net.w = cfg.data.w;
  cfg.net.d = cfg.data.d;
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    // Convert the byte offset into line/column for the message.
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError("config: JSON parse error in " + path.string() +
                      " at line " + std::to_string(line) + ", column " +
                      std::to_string(col) + ": " + e.what());
  }
  try {
    return run_config_from_json(j);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

ordered_json run_config_to_json(const RunConfig& cfg) {
  ordered_json j;
  j["seed"] = cfg.seed;
  ordered_json jd;
  jd["shape"] = {cfg.data.h, cfg.data.w, cfg.data.d};
  jd["eyes"] = cfg.data.eyes;
  jd["ssl_eyes"] = cfg.data.ssl_eyes;
  jd["ssl_val_fraction"] = cfg.data.ssl_val_fraction;
  jd["folds"] = cfg.data.folds;
  jd["min_visits"] = cfg.data.min_visits;
  jd["max_visits"] = cfg.data.max_visits;
  jd["mean_visit_interval"] = cfg.data.mean_visit_interval;
  jd["visit_interval_jitter"] = cfg.data.visit_interval_jitter;
  jd["min_visit_interval"] = cfg.data.min_visit_interval;
  jd["noise_sigma"] = cfg.data.noise_sigma;
  jd["texture_amplitude"] = cfg.data.texture_amplitude;
  jd["texture_modes"] = cfg.data.texture_modes;
  jd["deform_amplitude"] = cfg.data.deform_amplitude;
  jd["deform_modes"] = cfg.data.deform_modes;
  jd["lesions_min"] = cfg.data.lesions_min;
  jd["lesions_max"] = cfg.data.lesions_max;
  jd["conversion_threshold"] = cfg.data.conversion_threshold;
  jd["converter_fraction"] = cfg.data.converter_fraction;
  jd["growth_scale"] = cfg.data.growth_scale;
  jd["roi_top"] = cfg.data.roi_top;
  jd["roi_bottom"] = cfg.data.roi_bottom;
  jd["pair_window_months"] = cfg.data.pair_window_months;
  jd["horizon_months"] = cfg.data.horizon_months;
  ordered_json ja;
  ja["max_translate_frac"] = cfg.augment.max_translate_frac;
  ja["flip_prob"] = cfg.augment.flip_prob;
  ja["blur_sigma_max"] = cfg.augment.blur_sigma_max;
  ja["noise_sigma"] = cfg.augment.noise_sigma;
  jd["augment"] = ja;
  j["data"] = jd;
  ordered_json jn;
  jn["stem_channels"] = cfg.net.stem_channels;
  jn["feature_channels"] = cfg.net.feature_channels;
  jn["ln_eps"] = cfg.net.ln_eps;
  j["net"] = jn;
  ordered_json js;
  js["epochs"] = cfg.ssl.epochs;
  js["updates_per_epoch"] = cfg.ssl.updates_per_epoch;
  js["lr_min"] = cfg.ssl.lr_min;
  js["lr_max"] = cfg.ssl.lr_max;
  js["weight_decay"] = cfg.ssl.weight_decay;
  js["ema_momentum"] = cfg.ssl.ema_momentum;
  js["val_pairs"] = cfg.ssl.val_pairs;
  j["ssl"] = js;
  ordered_json jt;
  jt["epochs"] = cfg.ttc.epochs;
  jt["updates_per_epoch"] = cfg.ttc.updates_per_epoch;
  jt["batch_size"] = cfg.ttc.batch_size;
  jt["lr_min"] = cfg.ttc.lr_min;
  jt["lr_max"] = cfg.ttc.lr_max;
  jt["weight_decay"] = cfg.ttc.weight_decay;
  jt["fold"] = cfg.ttc.fold;
  j["ttc"] = jt;
  ordered_json je;
  je["time_points"] = cfg.eval.time_points;
  j["eval"] = je;
  return j;
}

}  // namespace morphtrack
