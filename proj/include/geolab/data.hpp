#pragma once

// Synthetic data for both tasks: textures and rigid warps, two-view scenes,
// crop augmentation with ground-truth adjustment, inlier selection and
// nested training subsets.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "geolab/error.hpp"
#include "geolab/geometry.hpp"
#include "geolab/metrics.hpp"

namespace geolab {

/// Grayscale image, row-major, nominally in [0, 1].
struct Image {
  std::size_t w = 0, h = 0;
  std::vector<double> px;

  Image() = default;
  Image(std::size_t width, std::size_t height, double fill = 0.0) : w(width), h(height), px(width * height, fill) {}

  double& at(std::size_t x, std::size_t y) { return px[y * w + x]; }
  double at(std::size_t x, std::size_t y) const { return px[y * w + x]; }
  bool empty() const { return px.empty(); }

  /// Bilinear sample at continuous (x, y); 0 outside [0, w-1] x [0, h-1].
  double sample(double x, double y) const {
    constexpr double slack = 1e-9;
    if (x < -slack || y < -slack || x > double(w - 1) + slack || y > double(h - 1) + slack) return 0.0;
    x = std::clamp(x, 0.0, double(w - 1));
    y = std::clamp(y, 0.0, double(h - 1));
    const auto x0 = static_cast<std::size_t>(std::floor(x)), y0 = static_cast<std::size_t>(std::floor(y));
    const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const double fx = x - double(x0), fy = y - double(y0);
    const double top = at(x0, y0) + fx * (at(x1, y0) - at(x0, y0));
    const double bot = at(x0, y1) + fx * (at(x1, y1) - at(x0, y1));
    return top + fy * (bot - top);
  }
};

/// Mixes (seed, index) into an independent stream seed.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Rigid task

struct RigidRanges {
  double rotation_deg = 30.0;
  double shift_px = 32.0;

  /// 32 px of shift at 224 px, scaled to the image size; rotation unchanged.
  static RigidRanges for_image_size(std::size_t size) { return {30.0, 32.0 * double(size) / 224.0}; }
};

struct RigidParams {
  double theta = 0.0;  // degrees
  double tx = 0.0, ty = 0.0;  // pixels
  std::array<double, 3> normalized{0.0, 0.0, 0.0};

  static RigidParams from_physical(double theta, double tx, double ty, const RigidRanges& r) {
    return {theta, tx, ty, {theta / r.rotation_deg, tx / r.shift_px, ty / r.shift_px}};
  }
  static RigidParams from_normalized(const std::array<double, 3>& n, const RigidRanges& r) {
    return {n[0] * r.rotation_deg, n[1] * r.shift_px, n[2] * r.shift_px, n};
  }
};

template <typename Rng>
RigidParams sample_rigid_params(Rng& rng, const RigidRanges& r = {}) {
  std::uniform_real_distribution<double> rot(-r.rotation_deg, r.rotation_deg), shift(-r.shift_px, r.shift_px);
  const double theta = rot(rng);
  const double tx = shift(rng);
  const double ty = shift(rng);
  return RigidParams::from_physical(theta, tx, ty, r);
}

/// Equal-weight value noise at cell sizes size/8 down to 2 px, plus a few
/// soft discs, rescaled to [0, 1]. Fine-scale structure is what makes the
/// rotation angle recoverable from small images.
inline Image gen_texture_image(std::uint64_t seed, std::size_t size) {
  if (size < 16) throw Error(ErrorKind::ConfigError, "texture size must be >= 16");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(size, size);
  for (std::size_t cell = size / 8; cell >= 2; cell /= 2) {
    const std::size_t n = size / cell + 2;
    std::vector<double> lattice(n * n);
    for (auto& v : lattice) v = u(rng);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double gx = double(x) / double(cell), gy = double(y) / double(cell);
        const auto ix = static_cast<std::size_t>(gx), iy = static_cast<std::size_t>(gy);
        auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
        const double fx = smooth(gx - double(ix)), fy = smooth(gy - double(iy));
        const double a = lattice[iy * n + ix], b = lattice[iy * n + ix + 1];
        const double c = lattice[(iy + 1) * n + ix], d = lattice[(iy + 1) * n + ix + 1];
        img.at(x, y) += ((a + fx * (b - a)) + fy * ((c + fx * (d - c)) - (a + fx * (b - a))));
      }
  }
  for (int k = 0; k < 3; ++k) {
    const double cx = u(rng) * double(size), cy = u(rng) * double(size);
    const double r = (0.08 + 0.12 * u(rng)) * double(size), amp = u(rng) - 0.5;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double d2 = (double(x) - cx) * (double(x) - cx) + (double(y) - cy) * (double(y) - cy);
        img.at(x, y) += amp * std::exp(-d2 / (2.0 * r * r));
      }
  }
  const auto [lo, hi] = std::minmax_element(img.px.begin(), img.px.end());
  const double l = *lo, span = std::max(*hi - l, 1e-12);
  for (auto& v : img.px) v = (v - l) / span;
  return img;
}

/// Rotation by theta about the image center followed by translation:
/// p' = R(theta)(p - c) + c + t with c = ((w-1)/2, (h-1)/2), resampled by
/// inverse mapping. With y pointing down, positive theta turns +x toward +y.
inline Image warp_rigid(const Image& img, const RigidParams& p) {
  if (img.w != img.h) throw Error(ErrorKind::ShapeError, "warp_rigid expects a square image");
  const double rad = p.theta * std::numbers::pi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const double cx = (double(img.w) - 1.0) / 2.0, cy = (double(img.h) - 1.0) / 2.0;
  Image out(img.w, img.h);
  for (std::size_t y = 0; y < img.h; ++y)
    for (std::size_t x = 0; x < img.w; ++x) {
      const double dx = double(x) - cx - p.tx, dy = double(y) - cy - p.ty;
      // R(-theta) applied to (dx, dy)
      const double sx = c * dx + s * dy + cx;
      const double sy = -s * dx + c * dy + cy;
      out.at(x, y) = img.sample(sx, sy);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Photometric jitter

struct Jitter {
  double brightness = 0.0;  // additive
  double contrast = 1.0;    // multiplicative about the mean
  double blur_sigma = 0.0;  // Gaussian blur, pixels

  static Jitter none() { return {}; }
};

template <typename Rng>
Jitter sample_jitter(Rng& rng) {
  std::uniform_real_distribution<double> b(-0.2, 0.2), lc(std::log(0.8), std::log(1.25)), s(0.0, 1.0);
  const double brightness = b(rng);
  const double contrast = std::exp(lc(rng));
  const double sigma = s(rng);
  return {brightness, contrast, sigma};
}

inline Image gaussian_blur(const Image& img, double sigma) {
  if (sigma < 1e-3) return img;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  auto clampi = [](long v, long hi) { return static_cast<std::size_t>(std::clamp(v, 0L, hi)); };
  Image tmp(img.w, img.h), out(img.w, img.h);
  for (std::size_t y = 0; y < img.h; ++y)
    for (std::size_t x = 0; x < img.w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * img.at(clampi(long(x) + i, long(img.w) - 1), y);
      tmp.at(x, y) = acc;
    }
  for (std::size_t y = 0; y < img.h; ++y)
    for (std::size_t x = 0; x < img.w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp.at(x, clampi(long(y) + i, long(img.h) - 1));
      out.at(x, y) = acc;
    }
  return out;
}

inline Image apply_jitter(const Image& img, const Jitter& j) {
  Image out = gaussian_blur(img, j.blur_sigma);
  const double mean = std::accumulate(out.px.begin(), out.px.end(), 0.0) / double(out.px.size());
  for (auto& v : out.px) {
    if (j.contrast != 1.0) v = (v - mean) * j.contrast + mean;
    v = std::clamp(v + j.brightness, 0.0, 1.0);
  }
  return out;
}

/// Bilinear resize to (w, h) with the pixel map x' = x * w / src.w, then a
/// crop window; the geometric counterpart is affine_from_cropspec.
inline Image resize_and_crop(const Image& img, const CropSpec& spec) {
  if (!spec.valid()) throw Error(ErrorKind::InvalidCrop, "crop window exceeds the resized image");
  const double sx = double(img.w) / spec.resize_w, sy = double(img.h) / spec.resize_h;
  Image out(spec.crop_w, spec.crop_h);
  for (int y = 0; y < spec.crop_h; ++y)
    for (int x = 0; x < spec.crop_w; ++x) {
      const double rx = (x + spec.offset_x) * sx, ry = (y + spec.offset_y) * sy;
      out.at(x, y) = img.sample(std::min(rx, double(img.w - 1)), std::min(ry, double(img.h - 1)));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Two-view scenes

struct StereoConfig {
  std::size_t n_points = 100;
  double noise_px = 0.0;
  double outlier_frac = 0.0;
  double baseline_min = 0.3, baseline_max = 1.0;  // |t|, scene units
  double rot_max_deg = 10.0;
  double depth_min = 4.0, depth_max = 20.0;
  double focal_min = 300.0, focal_max = 800.0;
  double frame_w = 320.0, frame_h = 240.0;
  bool planar = false;
};

struct StereoScene {
  CameraIntrinsics k1, k2;
  RelativePose pose;
  FundamentalMatrix f;
  CorrespondenceSet corrs;
  std::vector<bool> outlier_mask;
  bool degenerate_for_eight_point = false;  // all points on one plane
};

template <typename Rng>
StereoScene gen_stereo_scene(Rng& rng, const StereoConfig& cfg) {
  if (cfg.n_points < 8) throw Error(ErrorKind::ConfigError, "gen_stereo_scene needs n_points >= 8");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u(rng); };
  auto camera = [&] {
    const double fx = uni(cfg.focal_min, cfg.focal_max);
    return CameraIntrinsics{fx, fx * uni(0.95, 1.05), cfg.frame_w / 2 + uni(-10, 10), cfg.frame_h / 2 + uni(-10, 10),
                            0.0};
  };
  const CameraIntrinsics k1 = camera();
  const CameraIntrinsics k2 = camera();
  std::normal_distribution<double> gauss(0.0, 1.0);
  RelativePose pose;
  const Vec3 axis(gauss(rng), gauss(rng), gauss(rng));
  pose.R = rotation_about_axis(axis, uni(0.0, cfg.rot_max_deg) * std::numbers::pi / 180.0);
  const Vec3 dir(u(rng) < 0.5 ? -1.0 : 1.0, uni(-0.2, 0.2), uni(-0.2, 0.2));
  pose.t = dir.normalized() * uni(cfg.baseline_min, cfg.baseline_max);
  StereoScene s{k1, k2, pose, compose_fundamental(k1, k2, pose), {}, {}, cfg.planar};

  // Plane n.X = d in camera-1 coordinates for the planar variant.
  const Vec3 plane_n = Vec3(uni(-0.3, 0.3), uni(-0.3, 0.3), 1.0).normalized();
  const double plane_d = uni(cfg.depth_min, cfg.depth_max) * plane_n.z();
  const Mat3 k1_inv = s.k1.matrix().inverse();
  auto in_frame = [&](const Vec2& v) { return v.x() >= 0 && v.y() >= 0 && v.x() < cfg.frame_w && v.y() < cfg.frame_h; };

  std::size_t attempts = 0;
  while (s.corrs.size() < cfg.n_points) {
    if (++attempts > 1000 * cfg.n_points) {
      throw Error(ErrorKind::DataError, "could not place points visible in both views");
    }
    const Vec2 p(uni(0, cfg.frame_w), uni(0, cfg.frame_h));
    const Vec3 ray = k1_inv * homogeneous(p);
    const double depth = cfg.planar ? plane_d / plane_n.dot(ray) : uni(cfg.depth_min, cfg.depth_max);
    if (!(depth > 0.1)) continue;
    const Vec3 x1 = ray * depth;
    const Vec3 x2 = s.pose.apply(x1);
    if (x2.z() <= 0.1) continue;
    const Vec2 q = s.k2.project(x2);
    if (!in_frame(q)) continue;
    s.corrs.push_back({s.k1.project(x1), q});
  }
  if (cfg.noise_px > 0.0) {
    for (auto& c : s.corrs) {
      c.p += cfg.noise_px * Vec2(gauss(rng), gauss(rng));
      c.q += cfg.noise_px * Vec2(gauss(rng), gauss(rng));
    }
  }
  s.outlier_mask.assign(cfg.n_points, false);
  const auto n_out = static_cast<std::size_t>(std::floor(cfg.outlier_frac * double(cfg.n_points)));
  std::vector<std::size_t> idx(cfg.n_points);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < n_out; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, cfg.n_points - 1);
    std::swap(idx[i], idx[pick(rng)]);
    s.outlier_mask[idx[i]] = true;
    s.corrs[idx[i]].q = Vec2(uni(0, cfg.frame_w), uni(0, cfg.frame_h));
  }
  return s;
}

/// Keeps correspondences with sed_point < tau under f.
inline CorrespondenceSet select_inliers(const Mat3& f, std::span<const Correspondence> corrs, double tau = 0.01) {
  CorrespondenceSet out;
  for (const auto& c : corrs)
    if (sed_point(f, c) < tau) out.push_back(c);
  if (out.empty()) throw Error(ErrorKind::EmptyInlierSet, "no correspondence has SED below " + std::to_string(tau));
  return out;
}
inline CorrespondenceSet select_inliers(const FundamentalMatrix& f, std::span<const Correspondence> corrs,
                                        double tau = 0.01) {
  return select_inliers(f.matrix(), corrs, tau);
}

struct AugmentedGeometry {
  Affine2 a1, a2;
  FundamentalMatrix f;
  CorrespondenceSet corrs;
};

/// Maps a scene's correspondences into the two cropped frames and adjusts F.
inline AugmentedGeometry augment_geometry(const FundamentalMatrix& f, std::span<const Correspondence> corrs,
                                          std::pair<double, double> frame, const CropSpec& crop1,
                                          const CropSpec& crop2) {
  AugmentedGeometry g{affine_from_cropspec(crop1, frame), affine_from_cropspec(crop2, frame), f, {}};
  g.f = adjust_f_for_transform(f, g.a1, g.a2);
  g.corrs.reserve(corrs.size());
  for (const auto& c : corrs) g.corrs.push_back({g.a1.apply(c.p), g.a2.apply(c.q)});
  return g;
}

/// Renders points as Gaussian blobs; amplitude[i] in (0, 1].
inline Image render_points(std::size_t size, std::span<const Vec2> pts, std::span<const double> amplitude,
                           double sigma = 0.7) {
  Image img(size, size);
  const int r = static_cast<int>(std::ceil(3 * sigma));
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const long px = std::lround(pts[i].x()), py = std::lround(pts[i].y());
    for (long y = py - r; y <= py + r; ++y)
      for (long x = px - r; x <= px + r; ++x) {
        if (x < 0 || y < 0 || x >= long(size) || y >= long(size)) continue;
        const double dx = double(x) - pts[i].x(), dy = double(y) - pts[i].y();
        img.at(x, y) += amplitude[i] * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      }
  }
  for (auto& v : img.px) v = std::min(v, 1.0);
  return img;
}

// ---------------------------------------------------------------------------
// Nested subsets

/// index_sets[r][k] is the size-k training set of replicate r. With
/// replicates = 3 the dataset is first split into three disjoint thirds;
/// within each, sets are prefixes of one seeded permutation, so they nest.
using SubsetTable = std::vector<std::vector<std::vector<std::size_t>>>;

inline SubsetTable nested_subsets(std::size_t dataset_size, std::span<const std::size_t> sizes, std::uint64_t seed,
                                  std::size_t replicates = 1) {
  if (sizes.empty() || replicates == 0) throw Error(ErrorKind::ConfigError, "nested_subsets: empty request");
  for (std::size_t i = 1; i < sizes.size(); ++i)
    if (sizes[i] >= sizes[i - 1]) throw Error(ErrorKind::ConfigError, "subset sizes must be strictly decreasing");
  const std::size_t part = dataset_size / replicates;
  if (sizes.front() > part) {
    throw Error(ErrorKind::SizeExceedsDataset, "size " + std::to_string(sizes.front()) + " exceeds the " +
                                                   std::to_string(part) + " pairs available per replicate");
  }
  std::vector<std::size_t> perm(dataset_size);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  SubsetTable out(replicates);
  for (std::size_t r = 0; r < replicates; ++r) {
    std::vector<std::size_t> mine(perm.begin() + r * part, perm.begin() + (r + 1) * part);
    std::mt19937_64 inner(stream_seed(seed, r));
    std::shuffle(mine.begin(), mine.end(), inner);
    for (std::size_t k : sizes) {
      std::vector<std::size_t> set(mine.begin(), mine.begin() + k);
      std::sort(set.begin(), set.end());
      out[r].push_back(std::move(set));
    }
  }
  return out;
}

/// Checks the nesting chain within each replicate and disjointness of the
/// replicates' largest sets; throws DataError on violation.
inline void verify_subsets(const SubsetTable& t) {
  for (std::size_t r = 0; r < t.size(); ++r)
    for (std::size_t k = 1; k < t[r].size(); ++k)
      if (!std::includes(t[r][k - 1].begin(), t[r][k - 1].end(), t[r][k].begin(), t[r][k].end())) {
        throw Error(ErrorKind::DataError, "subset " + std::to_string(k) + " of replicate " + std::to_string(r) +
                                              " is not nested in its predecessor");
      }
  for (std::size_t a = 0; a < t.size(); ++a)
    for (std::size_t b = a + 1; b < t.size(); ++b) {
      std::vector<std::size_t> both;
      std::set_intersection(t[a][0].begin(), t[a][0].end(), t[b][0].begin(), t[b][0].end(), std::back_inserter(both));
      if (!both.empty()) {
        throw Error(ErrorKind::DataError,
                    "replicates " + std::to_string(a) + " and " + std::to_string(b) + " share pairs");
      }
    }
}

}  // namespace geolab
