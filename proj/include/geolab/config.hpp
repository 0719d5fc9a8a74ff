#pragma once

// Experiment configuration: `key = value` lines, '#' comments. Unknown keys
// are rejected. Keys prefixed with `target.` override the data settings of
// the cross-domain target (e.g. `target.stereo.noise_px = 0.2`).
//
// Schema (defaults in brackets; "auto" depends on the task):
//   task                 rigid | fmatrix                         [rigid]
//   seed                 u64                                     [1]
//   precision            double | float                          [double]
//   data.source          synthetic | files                       [synthetic]
//   data.dir             directory written by gen-rigid/gen-stereo
//   data.count           pairs to generate                       [auto: 2000 / 512]
//   data.seed            u64                                     [seed]
//   data.val_fraction    (0, 1)                                  [0.2]
//   data.image_size      multiple of 8, >= 16                    [32]
//   data.rotation_range  degrees                                 [30]
//   data.shift_range     pixels; 0 scales 32 px by image_size/224 [0]
//   data.jitter          true | false                            [true]
//   data.crop_margin     resize = image_size + margin (F task)   [4]
//   stereo.n_points, stereo.noise_px, stereo.outlier_frac, stereo.baseline_min,
//   stereo.baseline_max, stereo.rot_max_deg, stereo.inlier_tau   [100, 0.05, 0.1, 0.3, 1.0, 10, 0.01]
//   model.backbone       tiny_conv | random_patch | external     [auto: tiny_conv / random_patch]
//   model.token_strategy spatial_conv | spatial_flat | gap | cls_only [spatial_conv]
//   model.input_combo    orig_trans | trans_only | orig_trans_hadamard | hadamard_only [orig_trans]
//   model.freeze_depth   u                                       [0]
//   train.lr             real                                    [1e-4]
//   train.batch          u                                       [auto: 32 / 8]
//   train.epochs         u                                       [auto: 100 / 200]
//   train.hparam_grid    true | false                            [false]
//   loss.alpha_rigid, loss.alpha_f, loss.beta_f, loss.delta_huber [10, 1, 10, 1]
//   sweep.sizes          comma list, strictly decreasing         [auto: 512,128,32 / 128,32]
//   sweep.replicates     u                                       [3]
//   freeze.depths        comma list                              [all depths]
//   cross.finetune_size  pairs used for head-only fine-tuning    [smallest sweep size]

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "geolab/binary_io.hpp"
#include "geolab/error.hpp"
#include "geolab/metrics.hpp"
#include "geolab/model.hpp"

namespace geolab {

enum class Precision { Double, Float };
enum class DataSource { Synthetic, Files };

struct DataConfig {
  DataSource source = DataSource::Synthetic;
  std::string dir;
  std::optional<std::size_t> count;
  std::optional<std::uint64_t> seed;
  double val_fraction = 0.2;
  std::size_t image_size = 32;
  double rotation_range = 30.0;
  double shift_range = 0.0;
  bool jitter = true;
  int crop_margin = 4;
  std::size_t n_points = 100;
  double noise_px = 0.05;
  double outlier_frac = 0.1;
  double baseline_min = 0.3, baseline_max = 1.0;
  double rot_max_deg = 10.0;
  double inlier_tau = 0.01;
};

struct ExperimentConfig {
  Task task = Task::Rigid;
  std::uint64_t seed = 1;
  Precision precision = Precision::Double;
  DataConfig data;
  DataConfig target;
  std::optional<BackboneKind> backbone;
  FusionConfig fusion;
  std::size_t freeze_depth = 0;
  double lr = 1e-4;
  std::optional<std::size_t> batch;
  std::optional<std::size_t> epochs;
  bool hparam_grid = false;
  LossWeights loss;
  std::vector<std::size_t> sweep_sizes;
  std::size_t replicates = 3;
  std::vector<std::size_t> freeze_depths;
  std::optional<std::size_t> finetune_size;

  // Resolved views with task-dependent defaults.
  std::size_t batch_size() const { return batch.value_or(task == Task::Rigid ? 32 : 8); }
  std::size_t epoch_count() const { return epochs.value_or(task == Task::Rigid ? 100 : 200); }
  BackboneKind backbone_kind() const {
    if (backbone) return *backbone;
    return task == Task::Rigid ? BackboneKind::TinyConv : BackboneKind::RandomPatch;
  }
  std::size_t data_count(const DataConfig& d) const { return d.count.value_or(task == Task::Rigid ? 2000 : 512); }
  std::uint64_t data_seed(const DataConfig& d) const { return d.seed.value_or(seed); }
  std::vector<std::size_t> sizes() const {
    if (!sweep_sizes.empty()) return sweep_sizes;
    return task == Task::Rigid ? std::vector<std::size_t>{512, 128, 32} : std::vector<std::size_t>{128, 32};
  }

  /// Canonical text of every resolved setting; its hash tags reports.
  std::string canonical() const;
  std::uint64_t hash() const { return binary::fnv1a(canonical()); }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename V>
V parse_number(const std::string& key, const std::string& v) {
  V out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw Error(ErrorKind::ConfigError, key + ": bad number '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(ErrorKind::ConfigError, key + ": expected true or false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<std::size_t>(key, trim(item)));
  if (out.empty()) throw Error(ErrorKind::ConfigError, key + ": empty list");
  return out;
}

inline std::string fmt(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

/// Returns false when `key` is not a data key.
inline bool set_data_key(DataConfig& d, const std::string& key, const std::string& v) {
  using config_detail::parse_number;
  if (key == "data.source") {
    if (v == "synthetic") d.source = DataSource::Synthetic;
    else if (v == "files") d.source = DataSource::Files;
    else throw Error(ErrorKind::ConfigError, "data.source: expected synthetic or files");
  } else if (key == "data.dir") d.dir = v;
  else if (key == "data.count") d.count = parse_number<std::size_t>(key, v);
  else if (key == "data.seed") d.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "data.val_fraction") d.val_fraction = parse_number<double>(key, v);
  else if (key == "data.image_size") d.image_size = parse_number<std::size_t>(key, v);
  else if (key == "data.rotation_range") d.rotation_range = parse_number<double>(key, v);
  else if (key == "data.shift_range") d.shift_range = parse_number<double>(key, v);
  else if (key == "data.jitter") d.jitter = parse_bool(key, v);
  else if (key == "data.crop_margin") d.crop_margin = parse_number<int>(key, v);
  else if (key == "stereo.n_points") d.n_points = parse_number<std::size_t>(key, v);
  else if (key == "stereo.noise_px") d.noise_px = parse_number<double>(key, v);
  else if (key == "stereo.outlier_frac") d.outlier_frac = parse_number<double>(key, v);
  else if (key == "stereo.baseline_min") d.baseline_min = parse_number<double>(key, v);
  else if (key == "stereo.baseline_max") d.baseline_max = parse_number<double>(key, v);
  else if (key == "stereo.rot_max_deg") d.rot_max_deg = parse_number<double>(key, v);
  else if (key == "stereo.inlier_tau") d.inlier_tau = parse_number<double>(key, v);
  else return false;
  return true;
}

inline std::string data_canonical(const std::string& prefix, const DataConfig& d, std::size_t count,
                                  std::uint64_t seed) {
  std::ostringstream os;
  auto kv = [&](const std::string& k, const std::string& v) { os << prefix << k << '=' << v << '\n'; };
  kv("data.source", d.source == DataSource::Synthetic ? "synthetic" : "files");
  kv("data.dir", d.dir);
  kv("data.count", std::to_string(count));
  kv("data.seed", std::to_string(seed));
  kv("data.val_fraction", fmt(d.val_fraction));
  kv("data.image_size", std::to_string(d.image_size));
  kv("data.rotation_range", fmt(d.rotation_range));
  kv("data.shift_range", fmt(d.shift_range));
  kv("data.jitter", d.jitter ? "true" : "false");
  kv("data.crop_margin", std::to_string(d.crop_margin));
  kv("stereo.n_points", std::to_string(d.n_points));
  kv("stereo.noise_px", fmt(d.noise_px));
  kv("stereo.outlier_frac", fmt(d.outlier_frac));
  kv("stereo.baseline_min", fmt(d.baseline_min));
  kv("stereo.baseline_max", fmt(d.baseline_max));
  kv("stereo.rot_max_deg", fmt(d.rot_max_deg));
  kv("stereo.inlier_tau", fmt(d.inlier_tau));
  return os.str();
}

inline void validate_data(const std::string& prefix, const DataConfig& d) {
  auto fail = [&](const std::string& msg) { throw Error(ErrorKind::ConfigError, prefix + msg); };
  if (!(d.val_fraction > 0.0 && d.val_fraction < 1.0)) fail("data.val_fraction must lie in (0, 1)");
  if (d.image_size < 16 || d.image_size % 8 != 0) fail("data.image_size must be a multiple of 8 and >= 16");
  if (!(d.rotation_range > 0.0) || d.shift_range < 0.0) fail("rigid ranges must be positive");
  if (d.crop_margin < 0) fail("data.crop_margin must be >= 0");
  if (d.n_points < 8) fail("stereo.n_points must be >= 8");
  if (d.noise_px < 0.0 || d.outlier_frac < 0.0 || d.outlier_frac >= 1.0) fail("stereo noise/outlier settings out of range");
  if (!(d.baseline_min > 0.0) || d.baseline_max < d.baseline_min) fail("stereo baseline range invalid");
  if (!(d.inlier_tau > 0.0)) fail("stereo.inlier_tau must be > 0");
  if (d.source == DataSource::Files && d.dir.empty()) fail("data.source = files needs data.dir");
}

}  // namespace config_detail

inline std::string ExperimentConfig::canonical() const {
  using config_detail::fmt;
  std::ostringstream os;
  auto kv = [&](const std::string& k, const std::string& v) { os << k << '=' << v << '\n'; };
  kv("task", std::string(names::task(task)));
  kv("seed", std::to_string(seed));
  kv("precision", precision == Precision::Double ? "double" : "float");
  os << config_detail::data_canonical("", data, data_count(data), data_seed(data));
  os << config_detail::data_canonical("target.", target, data_count(target), data_seed(target));
  kv("model.backbone", std::string(names::backbone(backbone_kind())));
  kv("model.token_strategy", std::string(names::token(fusion.token_strategy)));
  kv("model.input_combo", std::string(names::combo(fusion.input_combo)));
  kv("model.freeze_depth", std::to_string(freeze_depth));
  kv("train.lr", fmt(lr));
  kv("train.batch", std::to_string(batch_size()));
  kv("train.epochs", std::to_string(epoch_count()));
  kv("train.hparam_grid", hparam_grid ? "true" : "false");
  kv("loss.alpha_rigid", fmt(loss.alpha_rigid));
  kv("loss.alpha_f", fmt(loss.alpha_f));
  kv("loss.beta_f", fmt(loss.beta_f));
  kv("loss.delta_huber", fmt(loss.delta_huber));
  kv("sweep.sizes", config_detail::join(sizes()));
  kv("sweep.replicates", std::to_string(replicates));
  kv("freeze.depths", config_detail::join(freeze_depths));
  kv("cross.finetune_size", finetune_size ? std::to_string(*finetune_size) : "");
  return os.str();
}

inline ExperimentConfig parse_config(std::istream& in) {
  using namespace config_detail;
  ExperimentConfig c;
  std::vector<std::pair<std::string, std::string>> target_keys;
  std::map<std::string, std::size_t> seen;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::ConfigError, "line " + std::to_string(number) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq)), v = trim(line.substr(eq + 1));
    if (const auto [it, fresh] = seen.emplace(key, number); !fresh) {
      throw Error(ErrorKind::ConfigError, "line " + std::to_string(number) + ": '" + key + "' already set on line " +
                                              std::to_string(it->second));
    }
    try {
      if (key.rfind("target.", 0) == 0) {
        target_keys.emplace_back(key.substr(7), v);
        DataConfig probe;
        if (!set_data_key(probe, key.substr(7), v)) throw Error(ErrorKind::ConfigError, "unknown key '" + key + "'");
      } else if (set_data_key(c.data, key, v)) {
      } else if (key == "task") c.task = names::parse_task(v);
      else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
      else if (key == "precision") {
        if (v == "double") c.precision = Precision::Double;
        else if (v == "float") c.precision = Precision::Float;
        else throw Error(ErrorKind::ConfigError, "precision: expected double or float");
      } else if (key == "model.backbone") c.backbone = names::parse_backbone(v);
      else if (key == "model.token_strategy") c.fusion.token_strategy = names::parse_token(v);
      else if (key == "model.input_combo") c.fusion.input_combo = names::parse_combo(v);
      else if (key == "model.freeze_depth") c.freeze_depth = parse_number<std::size_t>(key, v);
      else if (key == "train.lr") c.lr = parse_number<double>(key, v);
      else if (key == "train.batch") c.batch = parse_number<std::size_t>(key, v);
      else if (key == "train.epochs") c.epochs = parse_number<std::size_t>(key, v);
      else if (key == "train.hparam_grid") c.hparam_grid = parse_bool(key, v);
      else if (key == "loss.alpha_rigid") c.loss.alpha_rigid = parse_number<double>(key, v);
      else if (key == "loss.alpha_f") c.loss.alpha_f = parse_number<double>(key, v);
      else if (key == "loss.beta_f") c.loss.beta_f = parse_number<double>(key, v);
      else if (key == "loss.delta_huber") c.loss.delta_huber = parse_number<double>(key, v);
      else if (key == "sweep.sizes") c.sweep_sizes = parse_list(key, v);
      else if (key == "sweep.replicates") c.replicates = parse_number<std::size_t>(key, v);
      else if (key == "freeze.depths") c.freeze_depths = parse_list(key, v);
      else if (key == "cross.finetune_size") c.finetune_size = parse_number<std::size_t>(key, v);
      else throw Error(ErrorKind::ConfigError, "unknown key '" + key + "'");
    } catch (const Error& e) {
      throw Error(e.kind(), "line " + std::to_string(number) + ": " + e.what());
    }
  }
  c.target = c.data;
  for (const auto& [k, v] : target_keys) set_data_key(c.target, k, v);

  validate_data("", c.data);
  validate_data("target.", c.target);
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::ConfigError, msg); };
  if (!(c.lr > 0.0)) fail("train.lr must be > 0");
  if (c.batch && *c.batch == 0) fail("train.batch must be >= 1");
  if (c.loss.alpha_rigid < 0 || c.loss.alpha_f < 0 || c.loss.beta_f < 0 || !(c.loss.delta_huber > 0)) {
    fail("loss weights must be >= 0 and delta_huber > 0");
  }
  if (c.replicates == 0) fail("sweep.replicates must be >= 1");
  const auto sizes = c.sizes();
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] == 0) fail("sweep.sizes entries must be >= 1");
    if (i && sizes[i] >= sizes[i - 1]) fail("sweep.sizes must be strictly decreasing");
  }
  if (c.backbone_kind() == BackboneKind::External && c.data.source != DataSource::Files) {
    fail("model.backbone = external needs data.source = files");
  }
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IOError, "cannot open config " + path);
  return parse_config(in);
}

}  // namespace geolab
