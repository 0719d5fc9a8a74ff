#pragma once

// Scalar evaluation metrics and training losses (double precision).

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "geolab/error.hpp"
#include "geolab/geometry.hpp"

namespace geolab {

struct LossWeights {
  double alpha_rigid = 10.0;  // shift terms of the rigid loss
  double alpha_f = 1.0;       // Huber term of the F loss
  double beta_f = 10.0;       // SED term of the F loss
  double delta_huber = 1.0;
};

inline constexpr double kDegenerateLineNorm = 1e-12;

namespace detail {

inline void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw Error(ErrorKind::LengthMismatch,
                std::string(what) + ": " + std::to_string(a) + " vs " + std::to_string(b));
  }
  if (a == 0) throw Error(ErrorKind::LengthMismatch, std::string(what) + ": empty input");
}

}  // namespace detail

/// Symmetric epipolar distance of one correspondence. A line whose
/// direction norm is below 1e-12 (point at the epipole) contributes no term;
/// if both are degenerate the distance is undefined.
inline double sed_point(const Mat3& f, const Correspondence& c) {
  const Vec3 p = homogeneous(c.p);
  const Vec3 q = homogeneous(c.q);
  const Vec3 line2 = f * p;
  const Vec3 line1 = f.transpose() * q;
  const double n2 = line2.head<2>().squaredNorm();
  const double n1 = line1.head<2>().squaredNorm();
  const bool ok2 = std::sqrt(n2) >= kDegenerateLineNorm;
  const bool ok1 = std::sqrt(n1) >= kDegenerateLineNorm;
  if (!ok1 && !ok2) {
    throw Error(ErrorKind::DegenerateLine, "both epipolar lines have vanishing direction");
  }
  const double r = q.dot(line2);
  double weight = 0.0;
  if (ok2) weight += 1.0 / n2;
  if (ok1) weight += 1.0 / n1;
  return weight * r * r;
}
inline double sed_point(const FundamentalMatrix& f, const Correspondence& c) {
  return sed_point(f.matrix(), c);
}

/// Sum of per-point symmetric epipolar distances.
inline double sed(const Mat3& f, std::span<const Correspondence> corrs) {
  if (corrs.empty()) throw Error(ErrorKind::LengthMismatch, "sed: empty correspondence set");
  double total = 0.0;
  for (const auto& c : corrs) total += sed_point(f, c);
  return total;
}
inline double sed(const FundamentalMatrix& f, std::span<const Correspondence> corrs) {
  return sed(f.matrix(), corrs);
}

inline double algebraic_distance(const Mat3& f, std::span<const Correspondence> corrs) {
  if (corrs.empty()) throw Error(ErrorKind::LengthMismatch, "algebraic_distance: empty set");
  double total = 0.0;
  for (const auto& c : corrs) total += std::abs(epipolar_residual(f, c));
  return total;
}
inline double algebraic_distance(const FundamentalMatrix& f, std::span<const Correspondence> corrs) {
  return algebraic_distance(f.matrix(), corrs);
}

inline double mse(std::span<const double> pred, std::span<const double> target) {
  detail::require_same_length(pred.size(), target.size(), "mse");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - target[i];
    total += e * e;
  }
  return total / static_cast<double>(pred.size());
}

inline double huber_term(double error, double delta) {
  const double a = std::abs(error);
  return a <= delta ? 0.5 * error * error : delta * (a - 0.5 * delta);
}

inline double huber(std::span<const double> pred, std::span<const double> target, double delta) {
  detail::require_same_length(pred.size(), target.size(), "huber");
  if (!(delta > 0.0)) throw Error(ErrorKind::ConfigError, "huber: delta must be positive");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) total += huber_term(pred[i] - target[i], delta);
  return total / static_cast<double>(pred.size());
}

/// Mean Euclidean distance in pixels.
inline double l2_translation_error(std::span<const Vec2> pred, std::span<const Vec2> gt) {
  detail::require_same_length(pred.size(), gt.size(), "l2_translation_error");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) total += (pred[i] - gt[i]).norm();
  return total / static_cast<double>(pred.size());
}

/// Mean absolute angle error in degrees; no wraparound.
inline double angle_mae(std::span<const double> pred_deg, std::span<const double> gt_deg) {
  detail::require_same_length(pred_deg.size(), gt_deg.size(), "angle_mae");
  double total = 0.0;
  for (std::size_t i = 0; i < pred_deg.size(); ++i) total += std::abs(pred_deg[i] - gt_deg[i]);
  return total / static_cast<double>(pred_deg.size());
}

/// Normalized (angle, shift_x, shift_y).
using RigidVector = std::array<double, 3>;

inline double rigid_loss(const RigidVector& pred, const RigidVector& gt, const LossWeights& w) {
  const std::span<const double> pa(pred.data(), 1), ga(gt.data(), 1);
  const std::span<const double> ps(pred.data() + 1, 2), gs(gt.data() + 1, 2);
  return mse(pa, ga) + huber(pa, ga, w.delta_huber) +
         w.alpha_rigid * (mse(ps, gs) + huber(ps, gs, w.delta_huber));
}

/// Row-major entries of a 3x3 matrix.
inline std::array<double, 9> flatten_row_major(const Mat3& m) {
  std::array<double, 9> out{};
  for (int i = 0; i < 9; ++i) out[i] = m(i / 3, i % 3);
  return out;
}

inline double f_total_loss(const Mat3& f_pred, const FundamentalMatrix& f_gt,
                           std::span<const Correspondence> inliers, const LossWeights& w) {
  const auto pred = flatten_row_major(f_pred);
  const auto gt = flatten_row_major(f_gt.matrix());
  return mse(pred, gt) + w.alpha_f * huber(pred, gt, w.delta_huber) + w.beta_f * sed(f_pred, inliers);
}

}  // namespace geolab
