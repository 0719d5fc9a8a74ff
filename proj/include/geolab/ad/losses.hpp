#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "geolab/ad/tensor.hpp"
#include "geolab/error.hpp"
#include "geolab/geometry.hpp"
#include "geolab/metrics.hpp"

namespace geolab::ad {

/// Mean squared error against constant targets, averaged over every entry.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, std::vector<T> target) {
  if (target.size() != pred.size()) {
    throw Error(ErrorKind::LengthMismatch, "mse_loss: target size mismatch");
  }
  const T count = static_cast<T>(pred.size());
  T total = T(0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T e = pred[i] - target[i];
    total += e * e;
  }
  return make_result<T>({1}, {total / count}, {pred},
                        [pred, target = std::move(target), count](Node<T>& n) {
                          auto& dp = pred.node()->ensure_grad();
                          for (std::size_t i = 0; i < dp.size(); ++i)
                            dp[i] += n.grad[0] * T(2) * (pred[i] - target[i]) / count;
                        });
}

/// Mean Huber loss against constant targets.
template <typename T>
Tensor<T> huber_loss(const Tensor<T>& pred, std::vector<T> target, T delta) {
  if (target.size() != pred.size()) {
    throw Error(ErrorKind::LengthMismatch, "huber_loss: target size mismatch");
  }
  const T count = static_cast<T>(pred.size());
  T total = T(0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T e = pred[i] - target[i];
    const T a = std::abs(e);
    total += a <= delta ? T(0.5) * e * e : delta * (a - T(0.5) * delta);
  }
  return make_result<T>({1}, {total / count}, {pred},
                        [pred, target = std::move(target), count, delta](Node<T>& n) {
                          auto& dp = pred.node()->ensure_grad();
                          for (std::size_t i = 0; i < dp.size(); ++i) {
                            const T e = pred[i] - target[i];
                            const T d = std::abs(e) <= delta ? e : (e > T(0) ? delta : -delta);
                            dp[i] += n.grad[0] * d / count;
                          }
                        });
}

/// Symmetric epipolar distance as a loss: per sample, the sum over its
/// correspondences (identical to `geolab::sed`), averaged over the batch.
/// `f` is (B, 3, 3) row-major.
template <typename T>
Tensor<T> sed_loss(const Tensor<T>& f, std::vector<std::span<const Correspondence>> corrs) {
  if (f.rank() != 3 || f.dim(1) != 3 || f.dim(2) != 3 || f.dim(0) != corrs.size()) {
    throw Error(ErrorKind::ShapeMismatch, "sed_loss: F " + shape_string(f.shape()) + " for " +
                                              std::to_string(corrs.size()) + " correspondence sets");
  }
  const std::size_t batch = f.dim(0);
  auto grads = std::make_shared<std::vector<T>>(batch * 9, T(0));
  T total = T(0);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    if (corrs[bi].empty()) throw Error(ErrorKind::LengthMismatch, "sed_loss: empty inlier set");
    const T* m = f.values().data() + bi * 9;
    T* g = grads->data() + bi * 9;
    for (const auto& c : corrs[bi]) {
      const T p[3] = {static_cast<T>(c.p.x()), static_cast<T>(c.p.y()), T(1)};
      const T q[3] = {static_cast<T>(c.q.x()), static_cast<T>(c.q.y()), T(1)};
      T l2[3], l1[3];  // l2 = F p (image 2), l1 = F^T q (image 1)
      for (int r = 0; r < 3; ++r) {
        l2[r] = m[r * 3] * p[0] + m[r * 3 + 1] * p[1] + m[r * 3 + 2] * p[2];
        l1[r] = m[r] * q[0] + m[3 + r] * q[1] + m[6 + r] * q[2];
      }
      const T a = l2[0] * l2[0] + l2[1] * l2[1];
      const T b = l1[0] * l1[0] + l1[1] * l1[1];
      const bool ok_a = std::sqrt(a) >= static_cast<T>(kDegenerateLineNorm);
      const bool ok_b = std::sqrt(b) >= static_cast<T>(kDegenerateLineNorm);
      if (!ok_a && !ok_b) {
        throw Error(ErrorKind::DegenerateLine, "sed_loss: both epipolar lines degenerate");
      }
      const T res = q[0] * l2[0] + q[1] * l2[1] + q[2] * l2[2];
      const T wa = ok_a ? T(1) / a : T(0);
      const T wb = ok_b ? T(1) / b : T(0);
      total += (wa + wb) * res * res;
      const T coeff = T(2) * res * (wa + wb);
      const T ca = ok_a ? res * res * wa * wa : T(0);
      const T cb = ok_b ? res * res * wb * wb : T(0);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          T d = coeff * q[i] * p[j];
          if (i < 2) d -= ca * T(2) * l2[i] * p[j];
          if (j < 2) d -= cb * T(2) * l1[j] * q[i];
          g[i * 3 + j] += d;
        }
    }
  }
  const T inv_batch = T(1) / static_cast<T>(batch);
  return make_result<T>({1}, {total * inv_batch}, {f}, [f, grads, inv_batch](Node<T>& n) {
    auto& df = f.node()->ensure_grad();
    for (std::size_t i = 0; i < df.size(); ++i) df[i] += n.grad[0] * (*grads)[i] * inv_batch;
  });
}

}  // namespace geolab::ad
