#pragma once

// Datasets, minibatch training, evaluation and the experiment protocols
// (sweep, freeze study, cross-domain transfer, ablation grid, classical
// baseline). Everything is templated on the training precision.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <future>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#if defined(__SSE3__)
#include <pmmintrin.h>
#endif

#include "geolab/ad/adam.hpp"
#include "geolab/ad/checkpoint.hpp"
#include "geolab/ad/losses.hpp"
#include "geolab/ad/ops.hpp"
#include "geolab/baseline.hpp"
#include "geolab/config.hpp"
#include "geolab/data.hpp"
#include "geolab/feature_io.hpp"
#include "geolab/metrics.hpp"
#include "geolab/model.hpp"
#include "geolab/report.hpp"
#include "geolab/stats.hpp"

namespace geolab {

inline constexpr std::size_t kCrossDomainFinetuneEpochs = 40;
inline constexpr std::size_t kEvalBatch = 64;

// ---------------------------------------------------------------------------
// Datasets

struct Sample {
  std::uint64_t id = 0;
  Image a, b;                         // stand-in backbone input
  std::optional<FeatureGrid> fa, fb;  // precomputed features
  RigidVector rigid{};                // normalized (angle, shift_x, shift_y)
  Mat3 f = Mat3::Zero();              // network frame, unit norm, canonical sign
  CorrespondenceSet inliers;          // network frame
  CorrespondenceSet raw;              // all correspondences incl. outliers, network frame
  std::optional<CameraPair> calibration;
};

struct Dataset {
  Task task = Task::Rigid;
  std::size_t image_size = 32;
  RigidRanges ranges;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool has_images() const { return !samples.empty() && !samples.front().a.empty(); }
  bool has_features() const { return !samples.empty() && samples.front().fa.has_value(); }
};

/// Flips F so that its largest-magnitude entry (first in row-major order) is
/// positive; the regression targets then have one sign per matrix.
inline Mat3 canonical_sign(const Mat3& f) {
  int best = 0;
  for (int i = 1; i < 9; ++i)
    if (std::abs(f(i / 3, i % 3)) > std::abs(f(best / 3, best % 3))) best = i;
  return f(best / 3, best % 3) < 0 ? Mat3(-f) : f;
}

inline RigidRanges rigid_ranges(const DataConfig& d) {
  RigidRanges r = RigidRanges::for_image_size(d.image_size);
  r.rotation_deg = d.rotation_range;
  if (d.shift_range > 0.0) r.shift_px = d.shift_range;
  return r;
}

inline Dataset gen_rigid_dataset(const DataConfig& d, std::size_t count, std::uint64_t seed) {
  Dataset ds;
  ds.task = Task::Rigid;
  ds.image_size = d.image_size;
  ds.ranges = rigid_ranges(d);
  ds.samples.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(stream_seed(seed, i));
    Sample& s = ds.samples[i];
    s.id = i;
    s.a = gen_texture_image(rng(), d.image_size);
    const RigidParams p = sample_rigid_params(rng, ds.ranges);
    s.b = warp_rigid(s.a, p);
    s.rigid = p.normalized;
    if (d.jitter) {
      s.a = apply_jitter(s.a, sample_jitter(rng));
      s.b = apply_jitter(s.b, sample_jitter(rng));
    }
  }
  return ds;
}

inline StereoConfig stereo_config(const DataConfig& d) {
  StereoConfig c;
  c.n_points = d.n_points;
  c.noise_px = d.noise_px;
  c.outlier_frac = d.outlier_frac;
  c.baseline_min = d.baseline_min;
  c.baseline_max = d.baseline_max;
  c.rot_max_deg = d.rot_max_deg;
  return c;
}

/// Two-view samples: each scene is resized to (size + margin)^2, cropped
/// independently per view, and its correspondences are rendered as blobs
/// whose amplitudes match across the two views.
inline Dataset gen_stereo_dataset(const DataConfig& d, std::size_t count, std::uint64_t seed) {
  Dataset ds;
  ds.task = Task::FMatrix;
  ds.image_size = d.image_size;
  ds.samples.resize(count);
  const StereoConfig sc = stereo_config(d);
  const int side = int(d.image_size), resize = side + d.crop_margin;
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(stream_seed(seed, i));
    StereoScene scene = gen_stereo_scene(rng, sc);
    CorrespondenceSet inl;
    for (;;) {
      try {
        inl = select_inliers(scene.f, scene.corrs, d.inlier_tau);
        break;
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::EmptyInlierSet) throw;
        scene = gen_stereo_scene(rng, sc);
      }
    }
    std::uniform_int_distribution<int> off(0, d.crop_margin);
    const CropSpec c1{resize, resize, side, side, double(off(rng)), double(off(rng))};
    const CropSpec c2{resize, resize, side, side, double(off(rng)), double(off(rng))};
    const AugmentedGeometry g = augment_geometry(scene.f, inl, {sc.frame_w, sc.frame_h}, c1, c2);

    Sample& s = ds.samples[i];
    s.id = i;
    s.f = canonical_sign(g.f.matrix());
    s.inliers = g.corrs;
    s.calibration = CameraPair{scene.k1, scene.k2, scene.pose};
    std::vector<Vec2> pa, pb;
    std::vector<double> amp;
    std::uniform_real_distribution<double> u(0.3, 1.0);
    for (const auto& c : scene.corrs) {
      s.raw.push_back({g.a1.apply(c.p), g.a2.apply(c.q)});
      pa.push_back(s.raw.back().p);
      pb.push_back(s.raw.back().q);
      amp.push_back(u(rng));
    }
    s.a = render_points(d.image_size, pa, amp);
    s.b = render_points(d.image_size, pb, amp);
  }
  return ds;
}

// -- dataset directories ------------------------------------------------------
//
//   manifest.txt   key = value (task, count, image_size, rotation_range, shift_range)
//   images.geof    GEOF with d = 1, s = image_size (raw pixels), optional
//   features.geof  GEOF feature grids, optional (stand-in or exported)
//   labels.txt     rigid or F labels
//   corrs/<id>.txt held-out inlier correspondences (F task)
//   raw/<id>.txt   every correspondence including outliers (F task)
//   calib/<id>.txt original-frame cameras (F task)

namespace fs = std::filesystem;

inline FeatureGrid image_grid(const Image& img) {
  FeatureGrid g{1, std::uint32_t(img.w), {}, std::nullopt};
  g.values.assign(img.px.begin(), img.px.end());
  return g;
}

inline Image grid_image(const FeatureGrid& g) {
  if (g.d != 1) throw Error(ErrorKind::ShapeError, "image grids must have d = 1");
  Image img(g.s, g.s);
  std::copy(g.values.begin(), g.values.end(), img.px.begin());
  return img;
}

/// Features of the fixed random-patch stand-in backbone, as an exporter would
/// write them.
inline void attach_standin_features(Dataset& ds) {
  ModelSpec spec;
  spec.task = ds.task;
  spec.backbone = BackboneKind::RandomPatch;
  spec.fusion.token_strategy = TokenStrategy::Gap;
  spec.image_size = ds.image_size;
  Model<float> m(spec);
  auto grid = [&](const Image& img) {
    std::vector<float> px(img.px.begin(), img.px.end());
    const auto out = m.backbone(ad::Tensor<float>::from({1, 1, ds.image_size, ds.image_size}, std::move(px)));
    FeatureGrid g{std::uint32_t(out.dim(1)), std::uint32_t(out.dim(2)), {}, std::nullopt};
    g.values.assign(out.values().begin(), out.values().end());
    return g;
  };
  for (auto& s : ds.samples) {
    s.fa = grid(s.a);
    s.fb = grid(s.b);
  }
}

inline void write_dataset_dir(const std::string& dir, const Dataset& ds) {
  fs::create_directories(dir);
  write_text_file(dir + "/manifest.txt", [&](std::ostream& o) {
    o << "task = " << names::task(ds.task) << "\ncount = " << ds.size() << "\nimage_size = " << ds.image_size
      << "\nrotation_range = " << config_detail::fmt(ds.ranges.rotation_deg)
      << "\nshift_range = " << config_detail::fmt(ds.ranges.shift_px) << "\n";
  });
  std::vector<FeatureRecord> images, features;
  for (const auto& s : ds.samples) {
    if (!s.a.empty()) {
      images.push_back({s.id, 0, image_grid(s.a)});
      images.push_back({s.id, 1, image_grid(s.b)});
    }
    if (s.fa) {
      features.push_back({s.id, 0, *s.fa});
      features.push_back({s.id, 1, *s.fb});
    }
  }
  if (!images.empty()) save_features(dir + "/images.geof", images);
  if (!features.empty()) save_features(dir + "/features.geof", features);
  if (ds.task == Task::Rigid) {
    std::vector<RigidLabel> labels;
    for (const auto& s : ds.samples) labels.push_back({s.id, s.rigid});
    write_text_file(dir + "/labels.txt", [&](std::ostream& o) { write_rigid_labels(o, labels); });
    return;
  }
  std::vector<FLabel> labels;
  for (const auto& s : ds.samples) labels.push_back({s.id, s.f});
  write_text_file(dir + "/labels.txt", [&](std::ostream& o) { write_f_labels(o, labels); });
  for (const char* sub : {"corrs", "raw", "calib"}) fs::create_directories(dir + "/" + sub);
  for (const auto& s : ds.samples) {
    const std::string name = "/" + std::to_string(s.id) + ".txt";
    write_text_file(dir + "/corrs" + name, [&](std::ostream& o) { write_correspondences(o, s.inliers); });
    write_text_file(dir + "/raw" + name, [&](std::ostream& o) { write_correspondences(o, s.raw); });
    if (s.calibration) write_text_file(dir + "/calib" + name, [&](std::ostream& o) { write_calibration(o, *s.calibration); });
  }
}

inline Dataset load_dataset_dir(const std::string& dir) {
  std::map<std::string, std::string> manifest;
  {
    std::ifstream in(dir + "/manifest.txt");
    if (!in) throw Error(ErrorKind::IOError, "cannot open " + dir + "/manifest.txt");
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      manifest[config_detail::trim(line.substr(0, eq))] = config_detail::trim(line.substr(eq + 1));
    }
  }
  auto need = [&](const std::string& k) {
    const auto it = manifest.find(k);
    if (it == manifest.end()) throw Error(ErrorKind::DataError, "manifest lacks '" + k + "'");
    return it->second;
  };
  Dataset ds;
  try {
    ds.task = names::parse_task(need("task"));
  } catch (const Error& e) {
    throw Error(ErrorKind::DataError, e.what());
  }
  ds.image_size = std::stoull(need("image_size"));
  ds.ranges.rotation_deg = std::stod(need("rotation_range"));
  ds.ranges.shift_px = std::stod(need("shift_range"));

  std::map<std::uint64_t, std::size_t> index;
  if (ds.task == Task::Rigid) {
    for (const auto& l : read_text_file<std::vector<RigidLabel>>(dir + "/labels.txt", read_rigid_labels)) {
      index[l.id] = ds.samples.size();
      ds.samples.push_back({});
      ds.samples.back().id = l.id;
      ds.samples.back().rigid = l.normalized;
    }
  } else {
    for (const auto& l : read_text_file<std::vector<FLabel>>(dir + "/labels.txt", read_f_labels)) {
      index[l.id] = ds.samples.size();
      Sample s;
      s.id = l.id;
      s.f = l.f;
      const std::string name = "/" + std::to_string(l.id) + ".txt";
      s.inliers = read_text_file<CorrespondenceSet>(dir + "/corrs" + name, read_correspondences);
      if (s.inliers.empty()) throw Error(ErrorKind::DataError, "pair " + std::to_string(l.id) + " has no inliers");
      if (fs::exists(dir + "/raw" + name)) s.raw = read_text_file<CorrespondenceSet>(dir + "/raw" + name, read_correspondences);
      if (fs::exists(dir + "/calib" + name)) s.calibration = read_calibration(dir + "/calib" + name);
      ds.samples.push_back(std::move(s));
    }
  }
  if (index.size() != ds.samples.size()) throw Error(ErrorKind::DataError, "labels repeat a pair id");
  if (std::to_string(ds.samples.size()) != need("count")) {
    throw Error(ErrorKind::DataError, "manifest count " + need("count") + " but " +
                                          std::to_string(ds.samples.size()) + " labels");
  }
  auto attach = [&](const std::string& file, bool as_images) {
    if (!fs::exists(file)) return;
    const auto pairs = pair_features(load_features(file));
    if (pairs.size() != ds.samples.size()) throw Error(ErrorKind::DataError, file + " does not cover every pair");
    for (const auto& [id, grids] : pairs) {
      const auto it = index.find(id);
      if (it == index.end()) throw Error(ErrorKind::DataError, file + " has unknown pair " + std::to_string(id));
      Sample& s = ds.samples[it->second];
      if (as_images) {
        if (grids.first.s != ds.image_size) throw Error(ErrorKind::ShapeError, "image grid side != image_size");
        s.a = grid_image(grids.first);
        s.b = grid_image(grids.second);
      } else {
        s.fa = grids.first;
        s.fb = grids.second;
      }
    }
  };
  attach(dir + "/images.geof", true);
  attach(dir + "/features.geof", false);
  if (!ds.has_images() && !ds.has_features()) throw Error(ErrorKind::DataError, dir + " has neither images nor features");
  return ds;
}

inline Dataset build_dataset(const ExperimentConfig& cfg, const DataConfig& d) {
  Dataset ds;
  if (d.source == DataSource::Files) {
    ds = load_dataset_dir(d.dir);
    if (ds.task != cfg.task) {
      throw Error(ErrorKind::TaskMismatch, "dataset " + d.dir + " is " + std::string(names::task(ds.task)) +
                                               ", config expects " + std::string(names::task(cfg.task)));
    }
  } else {
    ds = cfg.task == Task::Rigid ? gen_rigid_dataset(d, cfg.data_count(d), cfg.data_seed(d))
                                 : gen_stereo_dataset(d, cfg.data_count(d), cfg.data_seed(d));
  }
  if (cfg.backbone_kind() == BackboneKind::External ? !ds.has_features() : !ds.has_images()) {
    throw Error(ErrorKind::DataError, std::string("backbone ") + std::string(names::backbone(cfg.backbone_kind())) +
                                          " needs " + (ds.has_images() ? "features" : "images") + " in the dataset");
  }
  return ds;
}

struct Split {
  std::vector<std::size_t> pool, val;
};

/// The last round(n * val_fraction) pairs are held out for validation.
inline Split split_dataset(std::size_t n, double val_fraction) {
  const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(double(n) * val_fraction)));
  if (n_val >= n) throw Error(ErrorKind::DataError, "dataset of " + std::to_string(n) + " pairs is too small to split");
  Split s;
  for (std::size_t i = 0; i < n; ++i) (i < n - n_val ? s.pool : s.val).push_back(i);
  return s;
}

inline ModelSpec model_spec(const ExperimentConfig& cfg, const Dataset& ds, std::uint64_t seed) {
  ModelSpec spec;
  spec.task = cfg.task;
  spec.backbone = cfg.backbone_kind();
  spec.fusion = cfg.fusion;
  spec.freeze.frozen_prefix_depth = cfg.freeze_depth;
  spec.image_size = ds.image_size;
  spec.seed = seed;
  if (spec.backbone == BackboneKind::External) {
    const FeatureGrid& g = *ds.samples.front().fa;
    spec.feature_dim = g.d;
    spec.grid_side = g.s;
    spec.has_cls = g.cls.has_value();
  }
  spec.resolve();
  return spec;
}

// ---------------------------------------------------------------------------
// Batches and losses

template <typename T>
FeatureBatch<T> make_batch(const Model<T>& m, const Dataset& ds, std::span<const std::size_t> idx) {
  const std::size_t b = idx.size();
  if (m.spec().backbone != BackboneKind::External) {
    const std::size_t n = ds.image_size * ds.image_size;
    std::vector<T> va(b * n), vb(b * n);
    for (std::size_t i = 0; i < b; ++i) {
      const Sample& s = ds.samples[idx[i]];
      std::transform(s.a.px.begin(), s.a.px.end(), va.begin() + i * n, [](double v) { return static_cast<T>(v); });
      std::transform(s.b.px.begin(), s.b.px.end(), vb.begin() + i * n, [](double v) { return static_cast<T>(v); });
    }
    const ad::Shape shape{b, 1, ds.image_size, ds.image_size};
    return m.extract(ad::Tensor<T>::from(shape, std::move(va)), ad::Tensor<T>::from(shape, std::move(vb)));
  }
  const std::size_t d = m.spec().feature_dim, side = m.spec().grid_side, n = d * side * side;
  std::vector<T> ga(b * n), gb(b * n), ca, cb;
  const bool cls = m.spec().has_cls;
  if (cls) {
    ca.resize(b * d);
    cb.resize(b * d);
  }
  for (std::size_t i = 0; i < b; ++i) {
    const Sample& s = ds.samples[idx[i]];
    if (s.fa->values.size() != n || s.fb->values.size() != n) {
      throw Error(ErrorKind::ShapeError, "pair " + std::to_string(s.id) + " has a feature grid of the wrong size");
    }
    std::copy(s.fa->values.begin(), s.fa->values.end(), ga.begin() + i * n);
    std::copy(s.fb->values.begin(), s.fb->values.end(), gb.begin() + i * n);
    if (cls) {
      std::copy(s.fa->cls->begin(), s.fa->cls->end(), ca.begin() + i * d);
      std::copy(s.fb->cls->begin(), s.fb->cls->end(), cb.begin() + i * d);
    }
  }
  FeatureBatch<T> out;
  out.grid_a = ad::Tensor<T>::from({b, d, side, side}, std::move(ga));
  out.grid_b = ad::Tensor<T>::from({b, d, side, side}, std::move(gb));
  if (cls) {
    out.cls_a = ad::Tensor<T>::from({b, d}, std::move(ca));
    out.cls_b = ad::Tensor<T>::from({b, d}, std::move(cb));
  }
  return out;
}

/// Batch mean of the per-sample training loss (`rigid_loss` / `f_total_loss`).
template <typename T>
ad::Tensor<T> batch_loss(const ad::Tensor<T>& pred, const Dataset& ds, std::span<const std::size_t> idx,
                         const LossWeights& w) {
  const T delta = static_cast<T>(w.delta_huber);
  if (ds.task == Task::Rigid) {
    std::vector<T> angle, shift;
    for (std::size_t i : idx) {
      const auto& r = ds.samples[i].rigid;
      angle.push_back(static_cast<T>(r[0]));
      shift.push_back(static_cast<T>(r[1]));
      shift.push_back(static_cast<T>(r[2]));
    }
    const auto a = ad::slice_cols(pred, 0, 1);
    const auto s = ad::slice_cols(pred, 1, 3);
    const auto la = ad::add(ad::mse_loss(a, angle), ad::huber_loss(a, angle, delta));
    const auto ls = ad::add(ad::mse_loss(s, shift), ad::huber_loss(s, shift, delta));
    return ad::add(la, ad::scale(ls, static_cast<T>(w.alpha_rigid)));
  }
  std::vector<T> target;
  std::vector<std::span<const Correspondence>> corrs;
  for (std::size_t i : idx) {
    for (int k = 0; k < 9; ++k) target.push_back(static_cast<T>(ds.samples[i].f(k / 3, k % 3)));
    corrs.emplace_back(ds.samples[i].inliers);
  }
  const auto fit = ad::add(ad::mse_loss(pred, target),
                           ad::scale(ad::huber_loss(pred, target, delta), static_cast<T>(w.alpha_f)));
  return ad::add(fit, ad::scale(ad::sed_loss(pred, corrs), static_cast<T>(w.beta_f)));
}

/// Flushes subnormal floats to zero on this thread while alive. Training and
/// evaluation both hold one, so a model scores the same inside and outside
/// train().
class FlushSubnormals {
 public:
#if defined(__SSE3__)
  FlushSubnormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040); }  // FTZ | DAZ
  ~FlushSubnormals() { _mm_setcsr(saved_); }

 private:
  unsigned saved_;
#else
  FlushSubnormals() {}
#endif
};

// ---------------------------------------------------------------------------
// Evaluation

struct Metrics {
  std::size_t count = 0;
  std::size_t degenerate = 0;  // F predictions excluded from the means
  std::optional<double> loss, sed, ad, l2_px, angle_mae_deg;
};

struct Predictions {
  std::vector<RigidVector> rigid;
  std::vector<Mat3> f;
};

template <typename T>
Predictions predict(Model<T>& m, const Dataset& ds, std::span<const std::size_t> idx) {
  Predictions out;
  for (std::size_t start = 0; start < idx.size(); start += kEvalBatch) {
    const auto chunk = idx.subspan(start, std::min(kEvalBatch, idx.size() - start));
    const auto pred = m.forward(make_batch(m, ds, chunk), false);
    const auto v = pred.values();
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      if (ds.task == Task::Rigid) {
        out.rigid.push_back({double(v[i * 3]), double(v[i * 3 + 1]), double(v[i * 3 + 2])});
      } else {
        Mat3 f;
        for (int k = 0; k < 9; ++k) f(k / 3, k % 3) = double(v[i * 9 + k]);
        out.f.push_back(f);
      }
    }
  }
  return out;
}

/// The labels themselves, as a predictor.
inline Predictions ground_truth(const Dataset& ds, std::span<const std::size_t> idx) {
  Predictions out;
  for (std::size_t i : idx) {
    if (ds.task == Task::Rigid) out.rigid.push_back(ds.samples[i].rigid);
    else out.f.push_back(ds.samples[i].f);
  }
  return out;
}

/// A predicted F counts as degenerate when the normalization guard fired
/// (norm far from 1) or SED is undefined for one of its inliers.
inline Metrics evaluate_predictions(const Dataset& ds, std::span<const std::size_t> idx, const Predictions& p,
                                    const LossWeights& w) {
  Metrics m;
  m.count = idx.size();
  if (idx.empty()) return m;
  if (ds.task == Task::Rigid) {
    if (p.rigid.size() != idx.size()) throw Error(ErrorKind::LengthMismatch, "prediction count");
    std::vector<Vec2> pt, gt;
    std::vector<double> pa, ga;
    double loss = 0.0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto& r = p.rigid[i];
      const auto& g = ds.samples[idx[i]].rigid;
      pa.push_back(r[0] * ds.ranges.rotation_deg);
      ga.push_back(g[0] * ds.ranges.rotation_deg);
      pt.emplace_back(r[1] * ds.ranges.shift_px, r[2] * ds.ranges.shift_px);
      gt.emplace_back(g[1] * ds.ranges.shift_px, g[2] * ds.ranges.shift_px);
      loss += rigid_loss(r, g, w);
    }
    m.loss = loss / double(idx.size());
    m.l2_px = l2_translation_error(pt, gt);
    m.angle_mae_deg = angle_mae(pa, ga);
    return m;
  }
  if (p.f.size() != idx.size()) throw Error(ErrorKind::LengthMismatch, "prediction count");
  double loss = 0.0, sed_sum = 0.0, ad_sum = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Sample& s = ds.samples[idx[i]];
    const Mat3& f = p.f[i];
    if (!(std::abs(f.norm() - 1.0) < 1e-3)) {
      ++m.degenerate;
      continue;
    }
    double pair_sed;
    try {
      pair_sed = sed(f, s.inliers);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegenerateLine) throw;
      ++m.degenerate;
      continue;
    }
    const double n = double(s.inliers.size());
    sed_sum += pair_sed / n;
    ad_sum += algebraic_distance(f, s.inliers) / n;
    const FundamentalMatrix gt = FundamentalMatrix::from_matrix(s.f);
    loss += f_total_loss(f, gt, s.inliers, w);
    ++used;
  }
  if (used) {
    m.loss = loss / double(used);
    m.sed = sed_sum / double(used);
    m.ad = ad_sum / double(used);
  }
  return m;
}

template <typename T>
Metrics evaluate(Model<T>& m, const Dataset& ds, std::span<const std::size_t> idx, const LossWeights& w) {
  const FlushSubnormals ftz;
  if (m.spec().task != ds.task) {
    throw Error(ErrorKind::TaskMismatch, "model is " + std::string(names::task(m.spec().task)) + ", dataset is " +
                                             std::string(names::task(ds.task)));
  }
  return evaluate_predictions(ds, idx, predict(m, ds, idx), w);
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  double lr = 1e-4;
  std::size_t batch = 32;
  std::size_t epochs = 100;
  LossWeights loss;
  std::uint64_t shuffle_seed = 1;
};

struct EpochLog {
  std::size_t epoch = 0;
  std::optional<double> train_loss;  // absent for epoch 0 (initialization)
  Metrics val;
};

struct TrainResult {
  std::vector<EpochLog> log;
  Metrics initial, last, best;
  std::size_t best_epoch = 0;
  ad::Checkpoint last_ckpt, best_ckpt;
};

inline double selection_score(const Metrics& m) { return m.loss.value_or(std::numeric_limits<double>::infinity()); }

namespace detail {

template <typename T>
std::vector<std::vector<T>> frozen_state(Model<T>& m) {
  std::vector<std::vector<T>> out;
  for (auto* p : m.parameters())
    if (p->frozen) out.emplace_back(p->tensor.values().begin(), p->tensor.values().end());
  for (const auto& st : m.stages())
    for (auto* bn : st.norms)
      if (bn->use_running_stats) {
        out.push_back(bn->running_mean.values);
        out.push_back(bn->running_var.values);
      }
  return out;
}

}  // namespace detail

/// Minibatch Adam. Epoch 0 is the evaluation at initialization. Keeps the
/// last and the best-validation-loss checkpoints. Verifies afterwards that
/// frozen parameters and frozen batchnorm statistics are unchanged.
template <typename T>
TrainResult train(Model<T>& model, const Dataset& ds, std::span<const std::size_t> train_idx,
                  std::span<const std::size_t> val_idx, const TrainOptions& opt,
                  const std::function<void(const EpochLog&)>& on_epoch = {}) {
  if (train_idx.empty()) throw Error(ErrorKind::DataError, "empty training set");
  if (opt.batch == 0) throw Error(ErrorKind::ConfigError, "batch size must be >= 1");
  if (model.spec().task != ds.task) throw Error(ErrorKind::TaskMismatch, "model and dataset tasks differ");
  const FlushSubnormals ftz;
  const auto frozen_before = detail::frozen_state(model);
  auto params = model.parameters();
  ad::AdamState<T> adam;
  adam.lr = opt.lr;
  std::mt19937_64 rng(opt.shuffle_seed);
  std::vector<std::size_t> order(train_idx.begin(), train_idx.end());

  TrainResult r;
  r.initial = evaluate(model, ds, val_idx, opt.loss);
  r.last = r.best = r.initial;
  r.last_ckpt = r.best_ckpt = model.to_checkpoint();
  r.log.push_back({0, std::nullopt, r.initial});
  if (on_epoch) on_epoch(r.log.back());

  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch) {
      const std::span<const std::size_t> chunk(order.data() + start, std::min(opt.batch, order.size() - start));
      auto loss = batch_loss(model.forward(make_batch(model, ds, chunk), true), ds, chunk, opt.loss);
      const double value = double(loss.item());
      if (!std::isfinite(value)) {
        throw Error(ErrorKind::NonFiniteLoss, "training loss became " + report_detail::number(value) + " in epoch " +
                                                  std::to_string(epoch));
      }
      total += value;
      ++steps;
      loss.backward();
      ad::adam_step(params, adam);
    }
    r.last = evaluate(model, ds, val_idx, opt.loss);
    r.log.push_back({epoch, total / double(steps), r.last});
    if (on_epoch) on_epoch(r.log.back());
    if (selection_score(r.last) < selection_score(r.best)) {
      r.best = r.last;
      r.best_epoch = epoch;
      r.best_ckpt = model.to_checkpoint();
    }
  }
  r.last_ckpt = model.to_checkpoint();
  if (detail::frozen_state(model) != frozen_before) {
    throw std::logic_error("frozen parameters or statistics changed during training");
  }
  return r;
}

// ---------------------------------------------------------------------------
// Protocols

/// Runs fn(0..n-1) on up to `threads` workers; results come back in index
/// order so output does not depend on scheduling.
template <typename R>
std::vector<R> parallel_map(std::size_t n, std::size_t threads, const std::function<R(std::size_t)>& fn) {
  std::vector<R> out(n);
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          out[i] = fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

struct RunContext {
  const ExperimentConfig& cfg;
  std::size_t threads = 1;
  std::function<void(const std::string&)> log = {};

  std::string hash() const { return hash_hex(cfg.hash()); }
  void say(const std::string& s) const {
    if (log) log(s);
  }
};

inline TrainOptions train_options(const ExperimentConfig& cfg, std::uint64_t shuffle_seed) {
  TrainOptions o;
  o.lr = cfg.lr;
  o.batch = cfg.batch_size();
  o.epochs = cfg.epoch_count();
  o.loss = cfg.loss;
  o.shuffle_seed = shuffle_seed;
  return o;
}

inline ReportRow metrics_row(const RunContext& ctx, const std::string& experiment, const std::string& variant,
                             const Metrics& m) {
  ReportRow r;
  r.experiment = experiment;
  r.task = std::string(names::task(ctx.cfg.task));
  r.variant = variant;
  r.loss = m.loss;
  r.sed = m.sed;
  r.ad = m.ad;
  r.l2_px = m.l2_px;
  r.angle_mae_deg = m.angle_mae_deg;
  if (ctx.cfg.task == Task::FMatrix) r.degenerate = m.degenerate;
  r.config_hash = ctx.hash();
  return r;
}

/// Rows for the last and best checkpoints of one training run.
inline std::vector<ReportRow> train_rows(const RunContext& ctx, const std::string& experiment, const std::string& variant,
                                         const TrainResult& t, std::size_t size, std::optional<std::size_t> replicate,
                                         std::size_t trainable) {
  std::vector<ReportRow> rows;
  for (const bool best : {false, true}) {
    ReportRow r = metrics_row(ctx, experiment, variant, best ? t.best : t.last);
    r.size = size;
    if (replicate) r.replicate = *replicate;
    r.model = best ? "best" : "last";
    r.epochs = best ? t.best_epoch : t.log.back().epoch;
    r.trainable_params = trainable;
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Mean and std rows per (size, model) over the replicate rows.
inline std::vector<ReportRow> aggregate_rows(const std::vector<ReportRow>& rows) {
  std::vector<ReportRow> out;
  std::vector<std::pair<std::uint64_t, std::string>> keys;
  for (const auto& r : rows) {
    const std::pair<std::uint64_t, std::string> k{r.size.value_or(0), r.model};
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  }
  for (const auto& [size, model] : keys) {
    std::vector<const ReportRow*> group;
    for (const auto& r : rows)
      if (r.size.value_or(0) == size && r.model == model) group.push_back(&r);
    ReportRow mean = *group.front(), sd = *group.front();
    mean.replicate.reset();
    sd.replicate.reset();
    mean.stat = "mean";
    sd.stat = "std";
    mean.epochs.reset();
    sd.epochs.reset();
    mean.degenerate.reset();
    sd.degenerate.reset();
    bool any_std = false;
    for (auto field : {&ReportRow::loss, &ReportRow::sed, &ReportRow::ad, &ReportRow::l2_px, &ReportRow::angle_mae_deg}) {
      std::vector<double> v;
      for (const auto* r : group)
        if (r->*field) v.push_back(*(r->*field));
      mean.*field = std::nullopt;
      sd.*field = std::nullopt;
      if (v.size() != group.size() || v.empty()) continue;
      const Summary s = summarize(v);
      mean.*field = s.mean;
      sd.*field = s.std;
      any_std = any_std || s.std.has_value();
    }
    out.push_back(std::move(mean));
    if (any_std) out.push_back(std::move(sd));
  }
  return out;
}

template <typename T>
struct TrainOutcome {
  std::vector<ReportRow> rows;
  TrainResult result;
  std::unique_ptr<Model<T>> model;
};

/// One training run on the whole pool, or the lr x batch grid when enabled
/// (selection by best validation loss).
template <typename T>
TrainOutcome<T> run_train(const RunContext& ctx, const Dataset& ds,
                          const std::function<void(const EpochLog&)>& on_epoch = {}) {
  const auto split = split_dataset(ds.size(), ctx.cfg.data.val_fraction);
  struct Point {
    double lr;
    std::size_t batch;
  };
  std::vector<Point> grid{{ctx.cfg.lr, ctx.cfg.batch_size()}};
  if (ctx.cfg.hparam_grid) grid = {{6e-5, 32}, {6e-5, 4}, {1e-4, 32}, {1e-4, 4}};
  TrainOutcome<T> best;
  std::vector<ReportRow> rows;
  for (const auto& g : grid) {
    auto model = std::make_unique<Model<T>>(model_spec(ctx.cfg, ds, ctx.cfg.seed));
    TrainOptions opt = train_options(ctx.cfg, stream_seed(ctx.cfg.seed, 1));
    opt.lr = g.lr;
    opt.batch = g.batch;
    ctx.say("train lr=" + report_detail::number(g.lr) + " batch=" + std::to_string(g.batch));
    TrainResult t = train(*model, ds, split.pool, split.val, opt, grid.size() == 1 ? on_epoch : nullptr);
    const std::string variant = ctx.cfg.hparam_grid
                                    ? "lr=" + report_detail::number(g.lr) + " batch=" + std::to_string(g.batch)
                                    : std::string(names::combo(ctx.cfg.fusion.input_combo)) + "/" +
                                          std::string(names::token(ctx.cfg.fusion.token_strategy));
    for (auto& r : train_rows(ctx, "train", variant, t, split.pool.size(), std::nullopt,
                              model->trainable_parameter_count()))
      rows.push_back(std::move(r));
    if (!best.model || selection_score(t.best) < selection_score(best.result.best)) {
      best.result = std::move(t);
      best.model = std::move(model);
      if (ctx.cfg.hparam_grid)
        for (auto& r : rows) r.note = r.variant == variant ? "selected" : "";
    }
  }
  best.rows = std::move(rows);
  return best;
}

/// Trains every (size, replicate) cell on nested subsets of the pool and
/// evaluates on the shared validation split.
template <typename T>
std::vector<ReportRow> run_sweep(const RunContext& ctx, const Dataset& ds, const std::string& experiment = "sweep",
                                 const std::string& variant = "") {
  const auto& cfg = ctx.cfg;
  const auto split = split_dataset(ds.size(), cfg.data.val_fraction);
  const auto sizes = cfg.sizes();
  const SubsetTable table = nested_subsets(split.pool.size(), sizes, stream_seed(cfg.seed, 7), cfg.replicates);
  verify_subsets(table);
  const std::size_t cells = sizes.size() * cfg.replicates;
  ctx.say(experiment + ": " + std::to_string(cells) + " runs");
  auto rows_per_cell = parallel_map<std::vector<ReportRow>>(cells, ctx.threads, [&](std::size_t c) {
    const std::size_t k = c % sizes.size(), rep = c / sizes.size();
    std::vector<std::size_t> idx;
    for (std::size_t j : table[rep][k]) idx.push_back(split.pool[j]);
    Model<T> model(model_spec(cfg, ds, stream_seed(cfg.seed, rep)));
    const TrainResult t = train(model, ds, idx, split.val, train_options(cfg, stream_seed(cfg.seed, 100 + rep)));
    ctx.say(experiment + " " + variant + " size " + std::to_string(sizes[k]) + " replicate " + std::to_string(rep) + " done");
    return train_rows(ctx, experiment, variant, t, sizes[k], rep, model.trainable_parameter_count());
  });
  std::vector<ReportRow> rows;
  for (std::size_t k = 0; k < sizes.size(); ++k)
    for (std::size_t rep = 0; rep < cfg.replicates; ++rep)
      for (auto& r : rows_per_cell[rep * sizes.size() + k]) rows.push_back(std::move(r));
  auto agg = aggregate_rows(rows);
  rows.insert(rows.end(), agg.begin(), agg.end());
  return rows;
}

inline std::size_t stage_count_for(const ExperimentConfig& cfg, const Dataset& ds) {
  ExperimentConfig probe = cfg;
  probe.freeze_depth = 0;
  return Model<float>(model_spec(probe, ds, cfg.seed)).stage_count();
}

/// One sweep per freeze depth, from fully trainable to fully frozen encoder.
template <typename T>
std::vector<ReportRow> run_freeze_study(const RunContext& ctx, const Dataset& ds) {
  std::vector<std::size_t> depths = ctx.cfg.freeze_depths;
  if (depths.empty()) {
    depths.resize(stage_count_for(ctx.cfg, ds) + 1);
    std::iota(depths.begin(), depths.end(), std::size_t{0});
  }
  std::vector<ReportRow> rows;
  for (std::size_t d : depths) {
    ExperimentConfig cfg = ctx.cfg;
    cfg.freeze_depth = d;
    const RunContext sub{cfg, ctx.threads, ctx.log};
    for (auto& r : run_sweep<T>(sub, ds, "freeze", "depth=" + std::to_string(d))) {
      r.config_hash = ctx.hash();
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

/// Zero-shot evaluation plus a head-only fine-tune of exactly 40 epochs on
/// the smallest target subset. Without a checkpoint the source model is
/// trained on the source pool first. `finetuned` receives the final model.
template <typename T>
std::vector<ReportRow> run_cross_domain(const RunContext& ctx, const Dataset& source, const Dataset& target,
                                        const std::optional<ad::Checkpoint>& source_ckpt = std::nullopt,
                                        ad::Checkpoint* finetuned = nullptr) {
  const auto& cfg = ctx.cfg;
  std::vector<ReportRow> rows;
  ad::Checkpoint ckpt;
  if (source_ckpt) {
    ckpt = *source_ckpt;
  } else {
    ctx.say("cross-domain: training the source model");
    auto out = run_train<T>(ctx, source);
    for (auto& r : out.rows) {
      r.experiment = "cross_domain";
      r.variant = "source";
      rows.push_back(std::move(r));
    }
    ckpt = out.result.last_ckpt;
  }
  auto model = Model<T>::from_checkpoint(ckpt);
  if (model->spec().task != target.task) throw Error(ErrorKind::TaskMismatch, "checkpoint task differs from target");

  const auto tsplit = split_dataset(target.size(), cfg.target.val_fraction);
  const std::string before = ad::checkpoint_bytes(model->to_checkpoint());
  const Metrics zero = evaluate(*model, target, tsplit.val, cfg.loss);
  if (ad::checkpoint_bytes(model->to_checkpoint()) != before) throw std::logic_error("zero-shot evaluation changed the model");
  ReportRow z = metrics_row(ctx, "cross_domain", "zero_shot", zero);
  z.epochs = 0;
  z.note = "checkpoint " + hash_hex(binary::fnv1a(before));
  rows.push_back(std::move(z));

  const auto sizes = cfg.sizes();
  const SubsetTable table = nested_subsets(tsplit.pool.size(), sizes, stream_seed(cfg.seed, 11), 1);
  verify_subsets(table);
  std::vector<std::size_t> idx;
  for (std::size_t j : table[0].back()) idx.push_back(tsplit.pool[j]);
  if (cfg.finetune_size) {
    if (*cfg.finetune_size > tsplit.pool.size()) throw Error(ErrorKind::SizeExceedsDataset, "cross.finetune_size exceeds the target pool");
    idx.assign(tsplit.pool.begin(), tsplit.pool.begin() + std::ptrdiff_t(*cfg.finetune_size));
  }
  model->apply_freeze({model->stage_count()});
  auto is_head = [](const ad::Parameter<T>& p) { return p.name.rfind("head.", 0) == 0; };
  const auto body_before = model->checksum([&](const auto& p) { return !is_head(p); });
  const auto head_before = model->checksum(is_head);
  TrainOptions opt = train_options(cfg, stream_seed(cfg.seed, 12));
  opt.epochs = kCrossDomainFinetuneEpochs;
  ctx.say("cross-domain: head-only fine-tune on " + std::to_string(idx.size()) + " pairs");
  const TrainResult t = train(*model, target, idx, tsplit.val, opt);
  if (model->checksum([&](const auto& p) { return !is_head(p); }) != body_before) {
    throw std::logic_error("fine-tuning changed non-head parameters");
  }
  for (auto& r : train_rows(ctx, "cross_domain", "finetune_head", t, idx.size(), std::nullopt,
                            model->trainable_parameter_count())) {
    r.note = model->checksum(is_head) != head_before ? "head updated" : "head unchanged";
    rows.push_back(std::move(r));
  }
  if (finetuned) *finetuned = model->to_checkpoint();
  return rows;
}

inline const std::array<InputCombo, 4>& ablation_rows() {
  static const std::array<InputCombo, 4> r{InputCombo::OrigTransHadamard, InputCombo::OrigTrans, InputCombo::TransOnly,
                                           InputCombo::HadamardOnly};
  return r;
}
inline const std::array<TokenStrategy, 4>& ablation_columns() {
  static const std::array<TokenStrategy, 4> c{TokenStrategy::SpatialFlat, TokenStrategy::Gap, TokenStrategy::SpatialConv,
                                              TokenStrategy::ClsOnly};
  return c;
}

/// 4 x 4 grid of input combination (rows) by token strategy (columns), in
/// table order. Cells the feature source cannot serve are reported skipped.
template <typename T>
std::vector<ReportRow> run_ablation(const RunContext& ctx, const Dataset& ds) {
  struct Cell {
    ExperimentConfig cfg;
    std::string variant;
  };
  std::vector<Cell> cells;
  for (InputCombo combo : ablation_rows())
    for (TokenStrategy tok : ablation_columns()) {
      ExperimentConfig c = ctx.cfg;
      c.fusion = {tok, combo};
      c.hparam_grid = false;
      cells.push_back({c, std::string(names::combo(combo)) + "/" + std::string(names::token(tok))});
    }
  auto per_cell = parallel_map<std::vector<ReportRow>>(cells.size(), ctx.threads, [&](std::size_t i) {
    const RunContext sub{cells[i].cfg, 1, ctx.log};
    try {
      model_spec(cells[i].cfg, ds, ctx.cfg.seed);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::ConfigUnsatisfiable) throw;
      ReportRow r;
      r.experiment = "ablation";
      r.task = std::string(names::task(ctx.cfg.task));
      r.variant = cells[i].variant;
      r.status = "skipped";
      r.note = e.what();
      r.config_hash = ctx.hash();
      return std::vector<ReportRow>{r};
    }
    auto out = run_train<T>(sub, ds);
    ctx.say("ablation " + cells[i].variant + " done");
    for (auto& r : out.rows) {
      r.experiment = "ablation";
      r.config_hash = ctx.hash();
    }
    return out.rows;
  });
  std::vector<ReportRow> rows;
  for (auto& c : per_cell) rows.insert(rows.end(), c.begin(), c.end());
  return rows;
}

/// Eight-point on all correspondences and RANSAC on the validation pairs,
/// scored like a model on the held-out inliers.
inline std::vector<ReportRow> run_baseline(const RunContext& ctx, const Dataset& ds,
                                           const RansacConfig& ransac = {}) {
  if (ds.task != Task::FMatrix) throw Error(ErrorKind::TaskMismatch, "the classical baseline needs the fmatrix task");
  const auto split = split_dataset(ds.size(), ctx.cfg.data.val_fraction);
  std::vector<ReportRow> rows;
  for (const bool robust : {false, true}) {
    Predictions p;
    std::size_t failures = 0;
    for (std::size_t i : split.val) {
      const Sample& s = ds.samples[i];
      if (s.raw.empty()) throw Error(ErrorKind::DataError, "pair " + std::to_string(s.id) + " has no raw correspondences");
      try {
        RansacConfig rc = ransac;
        rc.seed = stream_seed(ransac.seed, s.id);
        p.f.push_back(robust ? ransac_f(s.raw, rc).f.matrix() : eight_point(s.raw).matrix());
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::ConsensusFailure && e.kind() != ErrorKind::DegenerateConfiguration &&
            e.kind() != ErrorKind::DegenerateSet)
          throw;
        p.f.push_back(Mat3::Zero());  // scored as degenerate
        ++failures;
      }
    }
    ReportRow r = metrics_row(ctx, "baseline", robust ? "ransac" : "eight_point",
                              evaluate_predictions(ds, split.val, p, ctx.cfg.loss));
    r.size = split.val.size();
    if (failures) r.note = std::to_string(failures) + " estimation failures";
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Paired t-test between two variants' per-replicate values of one metric at
/// each size both share.
inline std::vector<ReportRow> t_test_rows(const std::vector<ReportRow>& in, const std::string& variant_a,
                                          const std::string& variant_b, const std::string& metric,
                                          const std::string& model = "last") {
  const std::map<std::string, std::optional<double> ReportRow::*> fields{
      {"loss", &ReportRow::loss}, {"sed", &ReportRow::sed}, {"ad", &ReportRow::ad},
      {"l2_px", &ReportRow::l2_px}, {"angle_mae_deg", &ReportRow::angle_mae_deg}};
  const auto f = fields.find(metric);
  if (f == fields.end()) throw Error(ErrorKind::ConfigError, "unknown metric '" + metric + "'");
  std::map<std::uint64_t, std::map<std::uint64_t, std::pair<std::optional<double>, std::optional<double>>>> by_size;
  std::string task, hash;
  for (const auto& r : in) {
    if (r.stat != "value" || r.model != model || !r.replicate || !r.size) continue;
    if (r.variant != variant_a && r.variant != variant_b) continue;
    auto& slot = by_size[*r.size][*r.replicate];
    (r.variant == variant_a ? slot.first : slot.second) = r.*(f->second);
    task = r.task;
    hash = r.config_hash;
  }
  std::vector<ReportRow> rows;
  for (const auto& [size, reps] : by_size) {
    std::vector<double> a, b;
    for (const auto& [rep, v] : reps)
      if (v.first && v.second) {
        a.push_back(*v.first);
        b.push_back(*v.second);
      }
    ReportRow r;
    r.experiment = "t_test";
    r.task = task;
    r.variant = variant_a + " vs " + variant_b;
    r.size = size;
    r.stat = metric;
    r.model = model;
    r.config_hash = hash;
    try {
      const auto t = paired_t_test(a, b);
      r.t = t.t;
      r.p = t.p;
    } catch (const Error& e) {
      r.status = "skipped";
      r.note = e.what();
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace geolab
