#pragma once

// Normalized eight-point estimation and a fixed-iteration RANSAC loop.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include <Eigen/SVD>

#include "geolab/error.hpp"
#include "geolab/geometry.hpp"
#include "geolab/metrics.hpp"

namespace geolab {

struct Normalized {
  std::vector<Vec2> points;
  Affine2 transform;  // points[i] = transform.apply(input[i])
};

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
inline Normalized hartley_normalize(std::span<const Vec2> pts) {
  if (pts.empty()) throw Error(ErrorKind::DegenerateSet, "no points to normalize");
  Vec2 centroid = Vec2::Zero();
  for (const auto& p : pts) centroid += p;
  centroid /= double(pts.size());
  double mean_dist = 0.0;
  for (const auto& p : pts) mean_dist += (p - centroid).norm();
  mean_dist /= double(pts.size());
  if (!(mean_dist > 1e-12 * std::max(1.0, centroid.norm()))) {
    throw Error(ErrorKind::DegenerateSet, "all points coincide");
  }
  const double s = std::numbers::sqrt2 / mean_dist;
  Normalized out{{}, Affine2::scaling(s, s, -s * centroid)};
  out.points.reserve(pts.size());
  for (const auto& p : pts) out.points.push_back(out.transform.apply(p));
  return out;
}

/// Smallest-to-largest ratio below which the design matrix counts as having
/// more than a one-dimensional null space.
inline constexpr double kDesignRankRatio = 1e-8;

inline FundamentalMatrix eight_point(std::span<const Correspondence> corrs) {
  if (corrs.size() < 8) {
    throw Error(ErrorKind::TooFewPoints, "eight_point needs >= 8 correspondences, got " + std::to_string(corrs.size()));
  }
  std::vector<Vec2> ps, qs;
  ps.reserve(corrs.size());
  qs.reserve(corrs.size());
  for (const auto& c : corrs) {
    ps.push_back(c.p);
    qs.push_back(c.q);
  }
  const Normalized np = hartley_normalize(ps), nq = hartley_normalize(qs);
  Eigen::Matrix<double, Eigen::Dynamic, 9> a(corrs.size(), 9);
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    const Vec2& p = np.points[i];
    const Vec2& q = nq.points[i];
    a.row(Eigen::Index(i)) << q.x() * p.x(), q.x() * p.y(), q.x(), q.y() * p.x(), q.y() * p.y(), q.y(), p.x(), p.y(),
        1.0;
  }
  Eigen::JacobiSVD<Eigen::Matrix<double, Eigen::Dynamic, 9>> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (!(sv(7) > kDesignRankRatio * sv(0))) {
    std::ostringstream os;
    os << "design matrix is rank deficient (sigma_8 / sigma_1 = " << sv(7) / sv(0) << ")";
    throw Error(ErrorKind::DegenerateConfiguration, os.str());
  }
  const Eigen::Matrix<double, 9, 1> v = svd.matrixV().col(8);
  Mat3 fn;
  fn << v(0), v(1), v(2), v(3), v(4), v(5), v(6), v(7), v(8);
  fn = enforce_rank2(fn);
  return FundamentalMatrix::from_matrix(nq.transform.homogeneous().transpose() * fn * np.transform.homogeneous());
}

struct RansacConfig {
  std::size_t iterations = 2000;
  double tau = 0.01;
  std::uint64_t seed = 0;
};

struct RansacResult {
  FundamentalMatrix f;
  std::vector<bool> inliers;
  std::size_t inlier_count = 0;
};

namespace detail {

// sed_point with a doubly degenerate point scored as an outlier.
inline double sed_or_inf(const Mat3& f, const Correspondence& c) {
  try {
    return sed_point(f, c);
  } catch (const Error&) {
    return std::numeric_limits<double>::infinity();
  }
}

}  // namespace detail

/// Scores each minimal-sample model by inlier count (ties: lower summed SED
/// over its inliers), then refits on the best consensus set.
inline RansacResult ransac_f(std::span<const Correspondence> corrs, const RansacConfig& cfg) {
  if (corrs.size() < 8) {
    throw Error(ErrorKind::TooFewPoints, "ransac_f needs >= 8 correspondences, got " + std::to_string(corrs.size()));
  }
  if (cfg.iterations == 0 || !(cfg.tau > 0.0)) throw Error(ErrorKind::ConfigError, "invalid RANSAC configuration");
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> idx(corrs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<Correspondence> sample(8);

  std::size_t best_count = 0;
  double best_cost = std::numeric_limits<double>::infinity();
  std::vector<bool> best_mask;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    for (std::size_t k = 0; k < 8; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, idx.size() - 1);
      std::swap(idx[k], idx[pick(rng)]);
      sample[k] = corrs[idx[k]];
    }
    Mat3 f;
    try {
      f = eight_point(sample).matrix();
    } catch (const Error&) {
      continue;
    }
    std::size_t count = 0;
    double cost = 0.0;
    std::vector<bool> mask(corrs.size(), false);
    for (std::size_t i = 0; i < corrs.size(); ++i) {
      const double e = detail::sed_or_inf(f, corrs[i]);
      if (e < cfg.tau) {
        mask[i] = true;
        ++count;
        cost += e;
      }
    }
    if (count > best_count || (count == best_count && count > 0 && cost < best_cost)) {
      best_count = count;
      best_cost = cost;
      best_mask = std::move(mask);
    }
  }
  if (best_count < 8) {
    throw Error(ErrorKind::ConsensusFailure,
                "best consensus has " + std::to_string(best_count) + " inliers after " +
                    std::to_string(cfg.iterations) + " iterations");
  }
  std::vector<Correspondence> consensus;
  for (std::size_t i = 0; i < corrs.size(); ++i)
    if (best_mask[i]) consensus.push_back(corrs[i]);
  RansacResult out{eight_point(consensus), std::vector<bool>(corrs.size(), false), 0};
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    if (detail::sed_or_inf(out.f.matrix(), corrs[i]) < cfg.tau) {
      out.inliers[i] = true;
      ++out.inlier_count;
    }
  }
  return out;
}

}  // namespace geolab
