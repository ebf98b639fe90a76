#include "morphtrack/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "json.hpp"
#include "morphtrack/io.hpp"
#include "morphtrack/warp.hpp"

namespace morphtrack {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kTwoPi = 6.283185307179586476925286766559;

}  // namespace

void PhantomConfig::validate() const {
  if (h < 16 || w < 16 || d < 2)
    throw std::invalid_argument("phantom: volume too small");
  if (eyes < 2 || ssl_eyes < 1 || ssl_eyes >= eyes)
    throw std::invalid_argument("phantom: need SSL and TTC eyes");
  if (min_visits < 3)
    throw std::invalid_argument("phantom: SSL needs at least 3 visits per eye");
  if (max_visits < min_visits)
    throw std::invalid_argument("phantom: max_visits < min_visits");
  if (folds < 2) throw std::invalid_argument("phantom: folds must be >= 2");
  if (roi_top < 0 || roi_bottom <= roi_top || roi_bottom >= h)
    throw std::invalid_argument("phantom: ROI band produces an empty mask");
  if (conversion_threshold < 0.0)
    throw std::invalid_argument("phantom: negative conversion threshold");
}

namespace {

struct TextureMode {
  double amp, fh, fw, fd, phase;
};

// Smooth per-eye background texture, fixed across visits.
std::vector<TextureMode> draw_texture(const PhantomConfig& cfg, Rng& rng) {
  std::vector<TextureMode> modes(static_cast<std::size_t>(cfg.texture_modes));
  for (auto& m : modes) {
    m.amp = rng.uniform(0.3, 1.0) * cfg.texture_amplitude;
    m.fh = static_cast<double>(rng.uniform_int(1, 3));
    m.fw = static_cast<double>(rng.uniform_int(1, 3));
    m.fd = static_cast<double>(rng.uniform_int(0, 1));
    m.phase = rng.uniform(0.0, kTwoPi);
  }
  return modes;
}

struct DeformMode {
  double amp, fh, fw, fd, phase;
};

// One bounded smooth field per component; mode amplitudes sum to one so the
// caller's scale bounds every axis derivative (non-folding by construction).
std::array<std::vector<DeformMode>, 3> draw_deformation(
    const PhantomConfig& cfg, Rng& rng) {
  std::array<std::vector<DeformMode>, 3> field;
  for (auto& comp : field) {
    comp.resize(static_cast<std::size_t>(cfg.deform_modes));
    double total = 0.0;
    for (auto& m : comp) {
      m.amp = rng.uniform(0.2, 1.0);
      total += m.amp;
      m.fh = static_cast<double>(rng.uniform_int(1, 2));
      m.fw = static_cast<double>(rng.uniform_int(1, 2));
      m.fd = static_cast<double>(rng.uniform_int(0, 1));
      m.phase = rng.uniform(0.0, kTwoPi);
    }
    for (auto& m : comp) m.amp /= total;
  }
  return field;
}

double eval_modes(const std::vector<TextureMode>& modes, double h, double w,
                  double d, int H, int W, int D) {
  double v = 0.0;
  for (const auto& m : modes)
    v += m.amp * std::cos(kTwoPi * (m.fh * h / H + m.fw * w / W + m.fd * d / D) +
                          m.phase);
  return v;
}

double eval_modes(const std::vector<DeformMode>& modes, double h, double w,
                  double d, int H, int W, int D) {
  double v = 0.0;
  for (const auto& m : modes)
    v += m.amp * std::cos(kTwoPi * (m.fh * h / H + m.fw * w / W + m.fd * d / D) +
                          m.phase);
  return v;
}

double clamp_unit(double v) { return v < -1.0 ? -1.0 : (v > 1.0 ? 1.0 : v); }

}  // namespace

EyeSeries generate_eye_series(const PhantomConfig& cfg, Rng& rng,
                              const std::string& eye_id) {
  cfg.validate();
  EyeSeries eye;
  eye.eye_id = eye_id;

  // Visit schedule.
  const int n_visits =
      static_cast<int>(rng.uniform_int(cfg.min_visits, cfg.max_visits));
  std::vector<double> times(static_cast<std::size_t>(n_visits), 0.0);
  for (int i = 1; i < n_visits; ++i) {
    const double gap = std::max(
        cfg.min_visit_interval,
        rng.normal(cfg.mean_visit_interval, cfg.visit_interval_jitter));
    times[static_cast<std::size_t>(i)] =
        times[static_cast<std::size_t>(i - 1)] + gap;
  }
  const double span = times.back();

  // ROI band, jittered a little per eye.
  const int band_shift = static_cast<int>(rng.uniform_int(-2, 2));
  const int roi_top = std::max(1, cfg.roi_top + band_shift);
  const int roi_bottom = std::min(cfg.h - 2, cfg.roi_bottom + band_shift);
  const double band1 = roi_top + 4.0;   // inner bright band
  const double band2 = roi_bottom - 6.0;  // outer bright band (lesion seat)

  const auto texture = draw_texture(cfg, rng);

  // Lesions: positions near the outer band, rates solved so the load crosses
  // the threshold at the drawn conversion time.
  const int n_lesions =
      static_cast<int>(rng.uniform_int(cfg.lesions_min, cfg.lesions_max));
  eye.lesions.resize(static_cast<std::size_t>(n_lesions));
  double weighted_volume = 0.0;
  std::vector<double> weights(static_cast<std::size_t>(n_lesions));
  for (int k = 0; k < n_lesions; ++k) {
    auto& l = eye.lesions[static_cast<std::size_t>(k)];
    l.ch = band2 + rng.uniform(-2.0, 1.0);
    l.cw = rng.uniform(6.0, cfg.w - 6.0);
    l.cd = rng.uniform(1.0, cfg.d - 1.0);
    l.sh = rng.uniform(1.5, 3.0);
    l.sw = rng.uniform(2.0, 5.0);
    l.sd = rng.uniform(0.8, 1.6);
    weights[static_cast<std::size_t>(k)] = rng.uniform(0.2, 1.0);
    weighted_volume += weights[static_cast<std::size_t>(k)] * l.sh * l.sw * l.sd;
  }
  const bool converter = rng.bernoulli(cfg.converter_fraction);
  const double target_tstar =
      converter ? rng.uniform(0.3 * span, 0.9 * span)
                : span * rng.uniform(1.4, 6.0);
  for (int k = 0; k < n_lesions; ++k) {
    auto& l = eye.lesions[static_cast<std::size_t>(k)];
    l.rate = cfg.growth_scale * cfg.conversion_threshold *
             weights[static_cast<std::size_t>(k)] /
             (target_tstar * weighted_volume);
  }

  // True conversion time from the load model itself.
  double load_rate = 0.0;  // load(t) = load_rate * t
  for (const auto& l : eye.lesions) load_rate += l.rate * l.sh * l.sw * l.sd;
  if (cfg.conversion_threshold <= 0.0)
    eye.conversion_time_true = 0.0;
  else if (load_rate <= 0.0)
    eye.conversion_time_true = kInf;
  else
    eye.conversion_time_true = cfg.conversion_threshold / load_rate;

  // Base volume: layer profile + texture.
  const std::size_t n = static_cast<std::size_t>(cfg.h) * cfg.w * cfg.d;
  std::vector<double> base(n), roi(n);
  std::size_t idx = 0;
  for (int hh = 0; hh < cfg.h; ++hh) {
    const bool inside = hh >= roi_top && hh <= roi_bottom;
    const double profile =
        inside ? -0.15 + 0.9 * std::exp(-0.5 * std::pow((hh - band1) / 1.5, 2)) +
                     1.1 * std::exp(-0.5 * std::pow((hh - band2) / 2.0, 2))
               : -1.0;
    for (int ww = 0; ww < cfg.w; ++ww) {
      for (int dd = 0; dd < cfg.d; ++dd, ++idx) {
        roi[idx] = inside ? 1.0 : 0.0;
        base[idx] = inside ? profile + eval_modes(texture, hh, ww, dd, cfg.h,
                                                  cfg.w, cfg.d)
                           : -1.0;
      }
    }
  }
  const Tensor base_vol =
      Tensor::from_data(Shape{1, cfg.h, cfg.w, cfg.d}, std::move(base));
  const Tensor roi_vol =
      Tensor::from_data(Shape{1, cfg.h, cfg.w, cfg.d}, std::move(roi));

  // First converted visit (if any).
  int first_converted = -1;
  for (int i = 0; i < n_visits; ++i)
    if (times[static_cast<std::size_t>(i)] >= eye.conversion_time_true) {
      first_converted = i;
      break;
    }

  eye.visits.resize(static_cast<std::size_t>(n_visits));
  for (int i = 0; i < n_visits; ++i) {
    Visit& v = eye.visits[static_cast<std::size_t>(i)];
    v.t_months = times[static_cast<std::size_t>(i)];

    // Bounded smooth deformation of the anatomy for this visit.
    const auto deform = draw_deformation(cfg, rng);
    std::vector<double> field(3 * n);
    std::size_t p = 0;
    for (int hh = 0; hh < cfg.h; ++hh)
      for (int ww = 0; ww < cfg.w; ++ww)
        for (int dd = 0; dd < cfg.d; ++dd, ++p) {
          field[p] = eval_modes(deform[0], hh, ww, dd, cfg.h, cfg.w, cfg.d);
          field[n + p] = eval_modes(deform[1], hh, ww, dd, cfg.h, cfg.w, cfg.d);
          field[2 * n + p] =
              eval_modes(deform[2], hh, ww, dd, cfg.h, cfg.w, cfg.d);
        }
    Tensor vis = apply_deformation(
        base_vol, Tensor::from_data(Shape{3, cfg.h, cfg.w, cfg.d},
                                    std::move(field)));

    // Lesions grow in place after the deformation, then noise and clamping.
    std::vector<double> vol(vis.data().begin(), vis.data().end());
    for (const auto& l : eye.lesions) {
      const double amp = l.rate * v.t_months;
      if (amp <= 0.0) continue;
      std::size_t q = 0;
      for (int hh = 0; hh < cfg.h; ++hh) {
        const double eh = std::pow((hh - l.ch) / l.sh, 2);
        if (eh > 18.0) {
          q += static_cast<std::size_t>(cfg.w) * cfg.d;
          continue;
        }
        for (int ww = 0; ww < cfg.w; ++ww) {
          const double ew = std::pow((ww - l.cw) / l.sw, 2);
          if (eh + ew > 18.0) {
            q += static_cast<std::size_t>(cfg.d);
            continue;
          }
          for (int dd = 0; dd < cfg.d; ++dd, ++q) {
            const double ed = std::pow((dd - l.cd) / l.sd, 2);
            vol[q] += amp * std::exp(-0.5 * (eh + ew + ed));
          }
        }
        q = static_cast<std::size_t>(hh + 1) * cfg.w * cfg.d;
      }
    }
    for (double& x : vol)
      x = clamp_unit(x + rng.normal(0.0, cfg.noise_sigma));
    v.volume = Tensor::from_data(Shape{1, cfg.h, cfg.w, cfg.d}, std::move(vol));
    v.roi = roi_vol;

    v.converted = v.t_months >= eye.conversion_time_true;
    if (first_converted < 0) {
      v.t_minus = times.back() - v.t_months;
      v.t_plus = kInf;
    } else {
      v.t_plus = times[static_cast<std::size_t>(first_converted)] - v.t_months;
      v.t_minus = first_converted > 0
                      ? times[static_cast<std::size_t>(first_converted - 1)] -
                            v.t_months
                      : -1.0;
    }
  }
  return eye;
}

PhantomDataset generate_dataset(const PhantomConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  PhantomDataset ds;
  ds.cfg = cfg;
  ds.seed = seed;
  Rng root(seed);
  ds.eyes.reserve(static_cast<std::size_t>(cfg.eyes));
  for (int i = 0; i < cfg.eyes; ++i) {
    Rng eye_rng = root.fork(static_cast<std::uint64_t>(i));
    char buf[16];
    std::snprintf(buf, sizeof(buf), "eye_%03d", i);
    ds.eyes.push_back(generate_eye_series(cfg, eye_rng, buf));
  }

  // SSL/TTC split: leading eyes SSL (tail of them validation), rest TTC.
  const int ssl_val =
      std::max(1, static_cast<int>(std::lround(cfg.ssl_eyes * cfg.ssl_val_fraction)));
  for (int i = 0; i < cfg.eyes; ++i) {
    EyeSeries& e = ds.eyes[static_cast<std::size_t>(i)];
    if (i < cfg.ssl_eyes)
      e.split = i < cfg.ssl_eyes - ssl_val ? "ssl_train" : "ssl_val";
    else
      e.split = "ttc";
  }

  // Stratified fold assignment for TTC eyes (by observed conversion).
  std::vector<int> converters, censored;
  for (int i = cfg.ssl_eyes; i < cfg.eyes; ++i) {
    const EyeSeries& e = ds.eyes[static_cast<std::size_t>(i)];
    const bool observed =
        e.conversion_time_true <= e.visits.back().t_months;
    (observed ? converters : censored).push_back(i);
  }
  int next_fold = 0;
  for (int i : converters) {
    ds.eyes[static_cast<std::size_t>(i)].fold = next_fold;
    next_fold = (next_fold + 1) % cfg.folds;
  }
  for (int i : censored) {
    ds.eyes[static_cast<std::size_t>(i)].fold = next_fold;
    next_fold = (next_fold + 1) % cfg.folds;
  }
  return ds;
}

namespace {

ordered_json config_to_json(const PhantomConfig& c) {
  ordered_json j;
  j["shape"] = {c.h, c.w, c.d};
  j["eyes"] = c.eyes;
  j["ssl_eyes"] = c.ssl_eyes;
  j["ssl_val_fraction"] = c.ssl_val_fraction;
  j["folds"] = c.folds;
  j["min_visits"] = c.min_visits;
  j["max_visits"] = c.max_visits;
  j["mean_visit_interval"] = c.mean_visit_interval;
  j["visit_interval_jitter"] = c.visit_interval_jitter;
  j["min_visit_interval"] = c.min_visit_interval;
  j["noise_sigma"] = c.noise_sigma;
  j["texture_amplitude"] = c.texture_amplitude;
  j["texture_modes"] = c.texture_modes;
  j["deform_amplitude"] = c.deform_amplitude;
  j["deform_modes"] = c.deform_modes;
  j["lesions_min"] = c.lesions_min;
  j["lesions_max"] = c.lesions_max;
  j["conversion_threshold"] = c.conversion_threshold;
  j["converter_fraction"] = c.converter_fraction;
  j["growth_scale"] = c.growth_scale;
  j["roi_top"] = c.roi_top;
  j["roi_bottom"] = c.roi_bottom;
  j["pair_window_months"] = c.pair_window_months;
  j["horizon_months"] = c.horizon_months;
  return j;
}

PhantomConfig config_from_json(const ordered_json& j) {
  PhantomConfig c;
  const auto& shape = j.at("shape");
  c.h = shape.at(0);
  c.w = shape.at(1);
  c.d = shape.at(2);
  c.eyes = j.at("eyes");
  c.ssl_eyes = j.at("ssl_eyes");
  c.ssl_val_fraction = j.at("ssl_val_fraction");
  c.folds = j.at("folds");
  c.min_visits = j.at("min_visits");
  c.max_visits = j.at("max_visits");
  c.mean_visit_interval = j.at("mean_visit_interval");
  c.visit_interval_jitter = j.at("visit_interval_jitter");
  c.min_visit_interval = j.at("min_visit_interval");
  c.noise_sigma = j.at("noise_sigma");
  c.texture_amplitude = j.at("texture_amplitude");
  c.texture_modes = j.at("texture_modes");
  c.deform_amplitude = j.at("deform_amplitude");
  c.deform_modes = j.at("deform_modes");
  c.lesions_min = j.at("lesions_min");
  c.lesions_max = j.at("lesions_max");
  c.conversion_threshold = j.at("conversion_threshold");
  c.converter_fraction = j.at("converter_fraction");
  c.growth_scale = j.at("growth_scale");
  c.roi_top = j.at("roi_top");
  c.roi_bottom = j.at("roi_bottom");
  c.pair_window_months = j.at("pair_window_months");
  c.horizon_months = j.at("horizon_months");
  return c;
}

}  // namespace

void write_dataset(const PhantomDataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  ordered_json index;
  index["format"] = "morphtrack-dataset-v1";
  index["seed"] = ds.seed;
  index["config"] = config_to_json(ds.cfg);
  index["eyes"] = ordered_json::array();
  for (const EyeSeries& e : ds.eyes) {
    ordered_json je;
    je["eye_id"] = e.eye_id;
    je["split"] = e.split;
    je["fold"] = e.fold;
    if (std::isfinite(e.conversion_time_true))
      je["conversion_time_true"] = e.conversion_time_true;
    else
      je["conversion_time_true"] = nullptr;
    je["visits"] = ordered_json::array();
    for (std::size_t i = 0; i < e.visits.size(); ++i) {
      const Visit& v = e.visits[i];
      char name[32];
      std::snprintf(name, sizeof(name), "visit_%02zu", i);
      const std::string vol_rel = e.eye_id + "/" + name + ".vol";
      const std::string roi_rel = e.eye_id + "/" + name + ".roi";
      write_volume(dir / vol_rel, v.volume);
      write_volume(dir / roi_rel, v.roi);
      ordered_json jv;
      jv["t_months"] = v.t_months;
      jv["converted"] = v.converted;
      jv["t_minus"] = v.t_minus;
      if (std::isfinite(v.t_plus))
        jv["t_plus"] = v.t_plus;
      else
        jv["t_plus"] = nullptr;
      jv["volume"] = vol_rel;
      jv["roi"] = roi_rel;
      je["visits"].push_back(jv);
    }
    index["eyes"].push_back(je);
  }
  write_file_atomic(dir / "index.json", index.dump(2) + "\n");
}

PhantomDataset load_dataset(const fs::path& dir) {
  const fs::path index_path = dir / "index.json";
  if (!fs::exists(index_path))
    throw std::runtime_error("dataset: missing " + index_path.string());
  const ordered_json index = ordered_json::parse(read_file(index_path));
  if (index.at("format") != "morphtrack-dataset-v1")
    throw std::runtime_error("dataset: unknown format in index.json");
  PhantomDataset ds;
  ds.seed = index.at("seed");
  ds.cfg = config_from_json(index.at("config"));
  for (const auto& je : index.at("eyes")) {
    EyeSeries e;
    e.eye_id = je.at("eye_id");
    e.split = je.at("split");
    e.fold = je.at("fold");
    e.conversion_time_true = je.at("conversion_time_true").is_null()
                                 ? kInf
                                 : je.at("conversion_time_true").get<double>();
    for (const auto& jv : je.at("visits")) {
      Visit v;
      v.t_months = jv.at("t_months");
      v.converted = jv.at("converted");
      v.t_minus = jv.at("t_minus");
      v.t_plus =
          jv.at("t_plus").is_null() ? kInf : jv.at("t_plus").get<double>();
      v.volume = read_volume(dir / jv.at("volume").get<std::string>());
      v.roi = read_volume(dir / jv.at("roi").get<std::string>());
      e.visits.push_back(std::move(v));
    }
    ds.eyes.push_back(std::move(e));
  }
  return ds;
}

std::vector<std::pair<int, int>> eligible_pairs(const EyeSeries& eye,
                                                double window_months) {
  std::vector<std::pair<int, int>> pairs;
  const int n = static_cast<int>(eye.visits.size());
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (eye.visits[static_cast<std::size_t>(j)].t_months -
              eye.visits[static_cast<std::size_t>(i)].t_months <=
          window_months)
        pairs.emplace_back(i, j);
  return pairs;
}

std::pair<int, int> sample_ssl_pair(const EyeSeries& eye, Rng& rng,
                                    double window_months) {
  const auto pairs = eligible_pairs(eye, window_months);
  if (pairs.empty())
    throw std::runtime_error("sample_ssl_pair: no visit pair of eye " +
                             eye.eye_id + " lies within the window");
  return pairs[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(pairs.size()) - 1))];
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

SharedAugment draw_shared_augment(Rng& rng, const Shape& vol_shape,
                                  double max_translate_frac, double flip_prob) {
  if (vol_shape.size() != 4)
    throw std::invalid_argument("augment: expected [1,H,W,D]");
  SharedAugment a;
  const int mh = static_cast<int>(max_translate_frac * vol_shape[1]);
  const int mw = static_cast<int>(max_translate_frac * vol_shape[2]);
  const int md = static_cast<int>(max_translate_frac * vol_shape[3]);
  a.dh = static_cast<int>(rng.uniform_int(-mh, mh));
  a.dw = static_cast<int>(rng.uniform_int(-mw, mw));
  a.dd = static_cast<int>(rng.uniform_int(-md, md));
  a.flip = rng.bernoulli(flip_prob);
  return a;
}

namespace {

Tensor translate_fill(const Tensor& t, int dh, int dw, int dd, double fill) {
  const int h = t.dim(1), w = t.dim(2), d = t.dim(3);
  const auto src = t.data();
  std::vector<double> out(t.numel(), fill);
  for (int hh = 0; hh < h; ++hh) {
    const int sh = hh - dh;
    if (sh < 0 || sh >= h) continue;
    for (int ww = 0; ww < w; ++ww) {
      const int sw = ww - dw;
      if (sw < 0 || sw >= w) continue;
      for (int dd2 = 0; dd2 < d; ++dd2) {
        const int sd = dd2 - dd;
        if (sd < 0 || sd >= d) continue;
        out[(static_cast<std::size_t>(hh) * w + ww) * d + dd2] =
            src[(static_cast<std::size_t>(sh) * w + sw) * d + sd];
      }
    }
  }
  return Tensor::from_data(t.shape(), std::move(out));
}

Tensor flip_w(const Tensor& t) {
  const int h = t.dim(1), w = t.dim(2), d = t.dim(3);
  const auto src = t.data();
  std::vector<double> out(t.numel());
  for (int hh = 0; hh < h; ++hh)
    for (int ww = 0; ww < w; ++ww)
      for (int dd = 0; dd < d; ++dd)
        out[(static_cast<std::size_t>(hh) * w + ww) * d + dd] =
            src[(static_cast<std::size_t>(hh) * w + (w - 1 - ww)) * d + dd];
  return Tensor::from_data(t.shape(), std::move(out));
}

std::vector<double> gauss_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  for (int i = -radius; i <= radius; ++i)
    k[static_cast<std::size_t>(i + radius)] =
        std::exp(-0.5 * (i * i) / (sigma * sigma));
  return k;
}

void blur_axis(std::vector<double>& v, const Shape& s, int axis,
               const std::vector<double>& kernel) {
  const int radius = static_cast<int>(kernel.size() / 2);
  const int len = s[static_cast<std::size_t>(axis)];
  std::size_t stride = 1;
  for (std::size_t a = s.size() - 1; static_cast<int>(a) > axis; --a)
    stride *= static_cast<std::size_t>(s[a]);
  const std::size_t outer_block = stride * static_cast<std::size_t>(len);
  std::vector<double> line(static_cast<std::size_t>(len));
  for (std::size_t base = 0; base < v.size(); base += outer_block) {
    for (std::size_t j = 0; j < stride; ++j) {
      for (int i = 0; i < len; ++i)
        line[static_cast<std::size_t>(i)] =
            v[base + static_cast<std::size_t>(i) * stride + j];
      for (int i = 0; i < len; ++i) {
        double acc = 0.0, norm = 0.0;
        for (int o = -radius; o <= radius; ++o) {
          const int p = i + o;
          if (p < 0 || p >= len) continue;
          const double kv = kernel[static_cast<std::size_t>(o + radius)];
          acc += kv * line[static_cast<std::size_t>(p)];
          norm += kv;
        }
        v[base + static_cast<std::size_t>(i) * stride + j] = acc / norm;
      }
    }
  }
}

}  // namespace

void apply_shared_augment(Tensor& vol, Tensor& roi, const SharedAugment& aug) {
  if (aug.dh != 0 || aug.dw != 0 || aug.dd != 0) {
    vol = translate_fill(vol, aug.dh, aug.dw, aug.dd, -1.0);
    roi = translate_fill(roi, aug.dh, aug.dw, aug.dd, 0.0);
  }
  if (aug.flip) {
    vol = flip_w(vol);
    roi = flip_w(roi);
  }
}

Tensor gaussian_blur(const Tensor& vol, double sigma) {
  // Always returns a fresh tensor so callers may mutate the result without
  // touching the source.
  std::vector<double> v(vol.data().begin(), vol.data().end());
  if (sigma > 0.0) {
    const auto kernel = gauss_kernel(sigma);
    for (int axis = 1; axis <= 3; ++axis)
      blur_axis(v, vol.shape(), axis, kernel);
  }
  return Tensor::from_data(vol.shape(), std::move(v));
}

void apply_photometric(Tensor& vol, Rng& rng, const AugmentConfig& cfg) {
  const double sigma = rng.uniform(0.0, cfg.blur_sigma_max);
  vol = gaussian_blur(vol, sigma);
  auto v = vol.mutable_data();
  for (double& x : v) x += rng.normal(0.0, cfg.noise_sigma);
}

void augment_single(Tensor& vol, Tensor& roi, Rng& rng,
                    const AugmentConfig& cfg) {
  const SharedAugment aug = draw_shared_augment(
      rng, vol.shape(), cfg.max_translate_frac, cfg.flip_prob);
  apply_shared_augment(vol, roi, aug);
  apply_photometric(vol, rng, cfg);
}

void augment_pair(Tensor& vol_a, Tensor& roi_a, Tensor& vol_b, Tensor& roi_b,
                  Rng& rng, const AugmentConfig& cfg) {
  const SharedAugment aug = draw_shared_augment(
      rng, vol_a.shape(), cfg.max_translate_frac, cfg.flip_prob);
  apply_shared_augment(vol_a, roi_a, aug);
  apply_shared_augment(vol_b, roi_b, aug);
  apply_photometric(vol_a, rng, cfg);
  apply_photometric(vol_b, rng, cfg);
}

}  // namespace morphtrack
