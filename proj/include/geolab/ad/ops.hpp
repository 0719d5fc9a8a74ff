#pragma once

// Differentiable layers. Every op takes batch-leading tensors and returns a
// new tensor whose backward closure accumulates exact analytic gradients
// into its inputs.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "geolab/ad/tensor.hpp"
#include "geolab/error.hpp"

namespace geolab::ad {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

[[noreturn]] inline void shape_error(const std::string& op, const std::string& msg) {
  throw Error(ErrorKind::ShapeMismatch, op + ": " + msg);
}

inline void require_rank(const std::string& op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    shape_error(op, "expected rank " + std::to_string(rank) + ", got " + shape_string(s));
  }
}

template <typename T>
void accumulate(Node<T>& parent, const std::vector<T>& delta) {
  auto& g = parent.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense layers

/// y = x W^T + b with x (B, in), W (out, in), b (out).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank("linear", x.shape(), 2);
  detail::require_rank("linear", w.shape(), 2);
  detail::require_rank("linear", b.shape(), 1);
  const std::size_t batch = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (w.dim(1) != in || b.dim(0) != out) {
    detail::shape_error("linear", "x " + shape_string(x.shape()) + ", W " + shape_string(w.shape()) +
                                      ", b " + shape_string(b.shape()));
  }
  std::vector<T> y(batch * out);
  {
    ConstMatMap<T> xm(x.values().data(), batch, in);
    ConstMatMap<T> wm(w.values().data(), out, in);
    MatMap<T> ym(y.data(), batch, out);
    ym.noalias() = xm * wm.transpose();
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(b.values().data(), out);
    ym.rowwise() += bv;
  }
  return make_result<T>({batch, out}, std::move(y), {x, w, b}, [x, w, b, batch, in, out](Node<T>& n) {
    ConstMatMap<T> dy(n.grad.data(), batch, out);
    if (x.requires_grad()) {
      ConstMatMap<T> wm(w.values().data(), out, in);
      MatMap<T> dx(x.node()->ensure_grad().data(), batch, in);
      dx.noalias() += dy * wm;
    }
    if (w.requires_grad()) {
      ConstMatMap<T> xm(x.values().data(), batch, in);
      MatMap<T> dw(w.node()->ensure_grad().data(), out, in);
      dw.noalias() += dy.transpose() * xm;
    }
    if (b.requires_grad()) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(b.node()->ensure_grad().data(), out);
      db += dy.colwise().sum();
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution (3x3, zero padding 1, stride 1) via im2col + GEMM.

namespace detail {

// cols is (C*9, B*H*W); column index = b*H*W + y*W + x.
template <typename T>
void im2col3x3(std::span<const T> x, std::size_t batch, std::size_t ch, std::size_t h,
               std::size_t w, std::vector<T>& cols) {
  const std::size_t hw = h * w, ncols = batch * hw;
  cols.assign(ch * 9 * ncols, T(0));
  for (std::size_t c = 0; c < ch; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = cols.data() + ((c * 9) + ky * 3 + kx) * ncols;
        for (std::size_t bi = 0; bi < batch; ++bi) {
          const T* src = x.data() + (bi * ch + c) * hw;
          T* dst = row + bi * hw;
          for (std::size_t yy = 0; yy < h; ++yy) {
            const long iy = static_cast<long>(yy) + ky - 1;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t xx = 0; xx < w; ++xx) {
              const long ix = static_cast<long>(xx) + kx - 1;
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              dst[yy * w + xx] = src[iy * w + ix];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im3x3(const T* cols, std::size_t batch, std::size_t ch, std::size_t h,
               std::size_t w, std::vector<T>& dx) {
  const std::size_t hw = h * w, ncols = batch * hw;
  for (std::size_t c = 0; c < ch; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = cols + ((c * 9) + ky * 3 + kx) * ncols;
        for (std::size_t bi = 0; bi < batch; ++bi) {
          T* dst = dx.data() + (bi * ch + c) * hw;
          const T* src = row + bi * hw;
          for (std::size_t yy = 0; yy < h; ++yy) {
            const long iy = static_cast<long>(yy) + ky - 1;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t xx = 0; xx < w; ++xx) {
              const long ix = static_cast<long>(xx) + kx - 1;
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              dst[iy * w + ix] += src[yy * w + xx];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// x (B, C, H, W), W (O, C, 3, 3), b (O) -> (B, O, H, W).
template <typename T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank("conv3x3", x.shape(), 4);
  detail::require_rank("conv3x3", w.shape(), 4);
  detail::require_rank("conv3x3", b.shape(), 1);
  const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t out_ch = w.dim(0);
  if (w.dim(1) != ch || w.dim(2) != 3 || w.dim(3) != 3 || b.dim(0) != out_ch) {
    detail::shape_error("conv3x3", "x " + shape_string(x.shape()) + ", W " +
                                       shape_string(w.shape()) + ", b " + shape_string(b.shape()));
  }
  const std::size_t hw = h * wd, ncols = batch * hw, k = ch * 9;
  auto cols = std::make_shared<std::vector<T>>();
  detail::im2col3x3<T>(x.values(), batch, ch, h, wd, *cols);

  RowMat<T> yt(out_ch, ncols);
  {
    ConstMatMap<T> wm(w.values().data(), out_ch, k);
    ConstMatMap<T> cm(cols->data(), k, ncols);
    yt.noalias() = wm * cm;
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bv(b.values().data(), out_ch);
    yt.colwise() += bv;
  }
  std::vector<T> y(batch * out_ch * hw);
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t o = 0; o < out_ch; ++o)
      std::copy_n(yt.data() + o * ncols + bi * hw, hw, y.data() + (bi * out_ch + o) * hw);

  return make_result<T>(
      {batch, out_ch, h, wd}, std::move(y), {x, w, b},
      [x, w, b, cols, batch, ch, h, wd, out_ch, hw, ncols, k](Node<T>& n) {
        RowMat<T> dyt(out_ch, ncols);
        for (std::size_t bi = 0; bi < batch; ++bi)
          for (std::size_t o = 0; o < out_ch; ++o)
            std::copy_n(n.grad.data() + (bi * out_ch + o) * hw, hw, dyt.data() + o * ncols + bi * hw);
        if (w.requires_grad()) {
          ConstMatMap<T> cm(cols->data(), k, ncols);
          MatMap<T> dw(w.node()->ensure_grad().data(), out_ch, k);
          dw.noalias() += dyt * cm.transpose();
        }
        if (b.requires_grad()) {
          Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(b.node()->ensure_grad().data(), out_ch);
          db += dyt.rowwise().sum();
        }
        if (x.requires_grad()) {
          ConstMatMap<T> wm(w.values().data(), out_ch, k);
          RowMat<T> dc(k, ncols);
          dc.noalias() = wm.transpose() * dyt;
          detail::col2im3x3<T>(dc.data(), batch, ch, h, wd, x.node()->ensure_grad());
        }
      });
}

/// Non-overlapping patch projection: x (B, C, H, W), W (D, C*p*p) -> (B, D, H/p, W/p).
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& x, const Tensor<T>& w, std::size_t patch) {
  detail::require_rank("patch_embed", x.shape(), 4);
  detail::require_rank("patch_embed", w.shape(), 2);
  const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (patch == 0 || h % patch != 0 || wd % patch != 0) {
    detail::shape_error("patch_embed", "input " + shape_string(x.shape()) +
                                           " not divisible by patch " + std::to_string(patch));
  }
  const std::size_t k = ch * patch * patch, d = w.dim(0);
  if (w.dim(1) != k) detail::shape_error("patch_embed", "W " + shape_string(w.shape()));
  const std::size_t gh = h / patch, gw = wd / patch, np = gh * gw;
  // patches: (B*np, k), patch-major rows; each row ordered (c, py, px).
  auto patches = std::make_shared<RowMat<T>>(batch * np, k);
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t gy = 0; gy < gh; ++gy)
      for (std::size_t gx = 0; gx < gw; ++gx) {
        T* row = patches->data() + (bi * np + gy * gw + gx) * k;
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t py = 0; py < patch; ++py)
            for (std::size_t px = 0; px < patch; ++px)
              row[(c * patch + py) * patch + px] =
                  x.values()[((bi * ch + c) * h + gy * patch + py) * wd + gx * patch + px];
      }
  RowMat<T> proj = (*patches) * ConstMatMap<T>(w.values().data(), d, k).transpose();  // (B*np, d)
  std::vector<T> y(batch * d * np);
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t pi = 0; pi < np; ++pi)
      for (std::size_t di = 0; di < d; ++di) y[(bi * d + di) * np + pi] = proj(bi * np + pi, di);

  return make_result<T>({batch, d, gh, gw}, std::move(y), {x, w},
                        [x, w, patches, batch, ch, h, wd, patch, gh, gw, np, k, d](Node<T>& n) {
                          RowMat<T> dproj(batch * np, d);
                          for (std::size_t bi = 0; bi < batch; ++bi)
                            for (std::size_t pi = 0; pi < np; ++pi)
                              for (std::size_t di = 0; di < d; ++di)
                                dproj(bi * np + pi, di) = n.grad[(bi * d + di) * np + pi];
                          if (w.requires_grad()) {
                            MatMap<T> dw(w.node()->ensure_grad().data(), d, k);
                            dw.noalias() += dproj.transpose() * (*patches);
                          }
                          if (x.requires_grad()) {
                            RowMat<T> dp = dproj * ConstMatMap<T>(w.values().data(), d, k);
                            auto& dx = x.node()->ensure_grad();
                            for (std::size_t bi = 0; bi < batch; ++bi)
                              for (std::size_t gy = 0; gy < gh; ++gy)
                                for (std::size_t gx = 0; gx < gw; ++gx) {
                                  const T* row = dp.data() + (bi * np + gy * gw + gx) * k;
                                  for (std::size_t c = 0; c < ch; ++c)
                                    for (std::size_t py = 0; py < patch; ++py)
                                      for (std::size_t px = 0; px < patch; ++px)
                                        dx[((bi * ch + c) * h + gy * patch + py) * wd + gx * patch + px] +=
                                            row[(c * patch + py) * patch + px];
                                }
                          }
                        });
}

/// 2x2 max pooling with stride 2; H and W must be even. Ties go to the
/// first position in row-major order.
template <typename T>
Tensor<T> max_pool2x2(const Tensor<T>& x) {
  detail::require_rank("max_pool2x2", x.shape(), 4);
  const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) detail::shape_error("max_pool2x2", "odd extent " + shape_string(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<T> y(batch * ch * oh * ow);
  auto arg = std::make_shared<std::vector<std::size_t>>(y.size());
  for (std::size_t plane = 0; plane < batch * ch; ++plane) {
    const T* src = x.values().data() + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (2 * oy + dy) * w + 2 * ox + dx;
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = plane * oh * ow + oy * ow + ox;
        y[o] = src[best];
        (*arg)[o] = plane * h * w + best;
      }
  }
  return make_result<T>({batch, ch, oh, ow}, std::move(y), {x}, [x, arg](Node<T>& n) {
    auto& dx = x.node()->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) dx[(*arg)[i]] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

/// Subgradient 0 at 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> y(x.values().begin(), x.values().end());
  for (auto& v : y) v = v > T(0) ? v : T(0);
  return make_result<T>(x.shape(), std::move(y), {x}, [x](Node<T>& n) {
    auto& dx = x.node()->ensure_grad();
    const auto xv = x.values();
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (xv[i] > T(0)) dx[i] += n.grad[i];
  });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(x.values()[i]);
  return make_result<T>(x.shape(), std::move(y), {x}, [x](Node<T>& n) {
    auto& dx = x.node()->ensure_grad();
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const T t = n.value[i];
      dx[i] += n.grad[i] * (T(1) - t * t);
    }
  });
}

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    detail::shape_error("hadamard", shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(y), {a, b}, [a, b](Node<T>& n) {
    if (a.requires_grad()) {
      auto& da = a.node()->ensure_grad();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += n.grad[i] * b[i];
    }
    if (b.requires_grad()) {
      auto& db = b.node()->ensure_grad();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += n.grad[i] * a[i];
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    detail::shape_error("add", shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(y), {a, b}, [a, b](Node<T>& n) {
    if (a.requires_grad()) detail::accumulate(*a.node(), n.grad);
    if (b.requires_grad()) detail::accumulate(*b.node(), n.grad);
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * s;
  return make_result<T>(a.shape(), std::move(y), {a}, [a, s](Node<T>& n) {
    auto& da = a.node()->ensure_grad();
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += n.grad[i] * s;
  });
}

/// sum_i x_i * weights_i; the weights are constants. Used to reduce a
/// tensor-valued function to a scalar for gradient checks.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, std::vector<T> weights) {
  if (weights.size() != x.size()) detail::shape_error("weighted_sum", "weight count mismatch");
  T total = T(0);
  for (std::size_t i = 0; i < x.size(); ++i) total += x[i] * weights[i];
  return make_result<T>({1}, {total}, {x}, [x, weights = std::move(weights)](Node<T>& n) {
    auto& dx = x.node()->ensure_grad();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += n.grad[0] * weights[i];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

/// (B, ...) -> (B, prod(...)).
template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
  if (x.rank() < 1) detail::shape_error("flatten", "rank-0 input");
  const std::size_t batch = x.dim(0);
  const std::size_t rest = batch ? x.size() / batch : 0;
  std::vector<T> y(x.values().begin(), x.values().end());
  return make_result<T>({batch, rest}, std::move(y), {x},
                        [x](Node<T>& n) { detail::accumulate(*x.node(), n.grad); });
}

/// Concatenates along axis 1 (depth). All inputs share the batch extent and
/// all trailing extents.
template <typename T>
Tensor<T> concat_depth(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) detail::shape_error("concat_depth", "no inputs");
  const Shape& ref = parts.front().shape();
  if (ref.size() < 2) detail::shape_error("concat_depth", "rank < 2 input " + shape_string(ref));
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size() && s[0] == ref[0];
    for (std::size_t i = 2; ok && i < s.size(); ++i) ok = s[i] == ref[i];
    if (!ok) detail::shape_error("concat_depth", shape_string(ref) + " vs " + shape_string(s));
    channels += s[1];
  }
  const std::size_t batch = ref[0];
  std::size_t inner = 1;
  for (std::size_t i = 2; i < ref.size(); ++i) inner *= ref[i];
  Shape out_shape = ref;
  out_shape[1] = channels;
  std::vector<T> y(batch * channels * inner);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.dim(1);
    for (std::size_t bi = 0; bi < batch; ++bi)
      std::copy_n(p.values().data() + bi * c * inner, c * inner,
                  y.data() + (bi * channels + offset) * inner);
    offset += c;
  }
  return make_result<T>(std::move(out_shape), std::move(y), parts,
                        [parts, batch, channels, inner](Node<T>& n) {
                          std::size_t off = 0;
                          for (const auto& p : parts) {
                            const std::size_t c = p.dim(1);
                            if (p.requires_grad()) {
                              auto& dp = p.node()->ensure_grad();
                              for (std::size_t bi = 0; bi < batch; ++bi)
                                for (std::size_t i = 0; i < c * inner; ++i)
                                  dp[bi * c * inner + i] += n.grad[(bi * channels + off) * inner + i];
                            }
                            off += c;
                          }
                        });
}

template <typename T>
Tensor<T> depth_concat(const Tensor<T>& a, const Tensor<T>& b) {
  return concat_depth<T>({a, b});
}

/// Columns [begin, end) of a (B, K) tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require_rank("slice_cols", x.shape(), 2);
  if (begin >= end || end > x.dim(1)) detail::shape_error("slice_cols", "bad column range");
  const std::size_t batch = x.dim(0), k = x.dim(1), width = end - begin;
  std::vector<T> y(batch * width);
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t j = 0; j < width; ++j) y[bi * width + j] = x[bi * k + begin + j];
  return make_result<T>({batch, width}, std::move(y), {x}, [x, batch, k, begin, width](Node<T>& n) {
    auto& dx = x.node()->ensure_grad();
    for (std::size_t bi = 0; bi < batch; ++bi)
      for (std::size_t j = 0; j < width; ++j) dx[bi * k + begin + j] += n.grad[bi * width + j];
  });
}

/// Global average pooling: (B, C, H, W) -> (B, C).
template <typename T>
Tensor<T> spatial_mean(const Tensor<T>& x) {
  detail::require_rank("spatial_mean", x.shape(), 4);
  const std::size_t batch = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> y(batch * ch, T(0));
  for (std::size_t plane = 0; plane < batch * ch; ++plane) {
    T s = T(0);
    for (std::size_t i = 0; i < hw; ++i) s += x[plane * hw + i];
    y[plane] = s / static_cast<T>(hw);
  }
  return make_result<T>({batch, ch}, std::move(y), {x}, [x, hw](Node<T>& n) {
    auto& dx = x.node()->ensure_grad();
    for (std::size_t plane = 0; plane < n.grad.size(); ++plane)
      for (std::size_t i = 0; i < hw; ++i) dx[plane * hw + i] += n.grad[plane] / static_cast<T>(hw);
  });
}

// ---------------------------------------------------------------------------
// Normalization

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel batch normalization over (B, C, ...) inputs. In training mode
/// batch statistics are used (biased variance) and the running statistics
/// are blended toward them; otherwise the running statistics are used.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    std::vector<T>& running_mean, std::vector<T>& running_var, bool training,
                    BatchNormOptions opt = {}) {
  if (x.rank() < 2) detail::shape_error("batchnorm", "rank < 2 input " + shape_string(x.shape()));
  const std::size_t batch = x.dim(0), ch = x.dim(1);
  const std::size_t inner = x.size() / (batch * ch);
  if (gamma.size() != ch || beta.size() != ch || running_mean.size() != ch ||
      running_var.size() != ch) {
    detail::shape_error("batchnorm", "channel count " + std::to_string(ch) + " vs parameters");
  }
  const std::size_t count = batch * inner;
  auto mean = std::make_shared<std::vector<T>>(ch);
  auto inv_std = std::make_shared<std::vector<T>>(ch);
  for (std::size_t c = 0; c < ch; ++c) {
    if (training) {
      T s = T(0);
      for (std::size_t bi = 0; bi < batch; ++bi)
        for (std::size_t i = 0; i < inner; ++i) s += x[(bi * ch + c) * inner + i];
      const T mu = s / static_cast<T>(count);
      T ss = T(0);
      for (std::size_t bi = 0; bi < batch; ++bi)
        for (std::size_t i = 0; i < inner; ++i) {
          const T d = x[(bi * ch + c) * inner + i] - mu;
          ss += d * d;
        }
      const T var = ss / static_cast<T>(count);
      (*mean)[c] = mu;
      (*inv_std)[c] = T(1) / std::sqrt(var + static_cast<T>(opt.eps));
      const T m = static_cast<T>(opt.momentum);
      running_mean[c] = (T(1) - m) * running_mean[c] + m * mu;
      running_var[c] = (T(1) - m) * running_var[c] + m * var;
    } else {
      (*mean)[c] = running_mean[c];
      (*inv_std)[c] = T(1) / std::sqrt(running_var[c] + static_cast<T>(opt.eps));
    }
  }
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  std::vector<T> y(x.size());
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (bi * ch + c) * inner + i;
        (*xhat)[idx] = (x[idx] - (*mean)[c]) * (*inv_std)[c];
        y[idx] = gamma[c] * (*xhat)[idx] + beta[c];
      }
  return make_result<T>(
      x.shape(), std::move(y), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, training, batch, ch, inner, count](Node<T>& n) {
        std::vector<T> sum_dy(ch, T(0)), sum_dy_xhat(ch, T(0));
        for (std::size_t bi = 0; bi < batch; ++bi)
          for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (bi * ch + c) * inner + i;
              sum_dy[c] += n.grad[idx];
              sum_dy_xhat[c] += n.grad[idx] * (*xhat)[idx];
            }
        if (gamma.requires_grad()) {
          auto& dg = gamma.node()->ensure_grad();
          for (std::size_t c = 0; c < ch; ++c) dg[c] += sum_dy_xhat[c];
        }
        if (beta.requires_grad()) {
          auto& db = beta.node()->ensure_grad();
          for (std::size_t c = 0; c < ch; ++c) db[c] += sum_dy[c];
        }
        if (x.requires_grad()) {
          auto& dx = x.node()->ensure_grad();
          const T cnt = static_cast<T>(count);
          for (std::size_t bi = 0; bi < batch; ++bi)
            for (std::size_t c = 0; c < ch; ++c) {
              const T g = gamma[c] * (*inv_std)[c];
              for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t idx = (bi * ch + c) * inner + i;
                if (training) {
                  dx[idx] += g * (n.grad[idx] - sum_dy[c] / cnt -
                                  (*xhat)[idx] * sum_dy_xhat[c] / cnt);
                } else {
                  dx[idx] += g * n.grad[idx];
                }
              }
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Geometry-aware layers

/// Global max pooling that also reports where each channel's maximum is:
/// (B, C, H, W) -> (B, 3C) laid out as [maxima | rows/(H-1) | cols/(W-1)].
/// The first maximum in row-major order wins ties; an extent of 1 maps its
/// index to 0. Index outputs carry no gradient.
template <typename T>
Tensor<T> location_aware_max_pool(const Tensor<T>& x) {
  detail::require_rank("location_aware_max_pool", x.shape(), 4);
  const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h == 0 || w == 0) detail::shape_error("location_aware_max_pool", "empty spatial extent");
  const std::size_t hw = h * w;
  std::vector<T> y(batch * 3 * ch);
  auto arg = std::make_shared<std::vector<std::size_t>>(batch * ch);
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t c = 0; c < ch; ++c) {
      const T* src = x.values().data() + (bi * ch + c) * hw;
      std::size_t best = 0;
      for (std::size_t i = 1; i < hw; ++i)
        if (src[i] > src[best]) best = i;
      const std::size_t row = best / w, col = best % w;
      T* out = y.data() + bi * 3 * ch;
      out[c] = src[best];
      out[ch + c] = h > 1 ? static_cast<T>(row) / static_cast<T>(h - 1) : T(0);
      out[2 * ch + c] = w > 1 ? static_cast<T>(col) / static_cast<T>(w - 1) : T(0);
      (*arg)[bi * ch + c] = (bi * ch + c) * hw + best;
    }
  return make_result<T>({batch, 3 * ch}, std::move(y), {x}, [x, arg, batch, ch](Node<T>& n) {
    auto& dx = x.node()->ensure_grad();
    for (std::size_t bi = 0; bi < batch; ++bi)
      for (std::size_t c = 0; c < ch; ++c) dx[(*arg)[bi * ch + c]] += n.grad[bi * 3 * ch + c];
  });
}

/// (B, 8) -> (B, 3, 3): columns f1 = v[0:3], f2 = v[3:6], f3 = v6*f1 + v7*f2.
template <typename T>
Tensor<T> rank_constraint(const Tensor<T>& v) {
  detail::require_rank("rank_constraint", v.shape(), 2);
  if (v.dim(1) != 8) detail::shape_error("rank_constraint", "expected (B, 8), got " + shape_string(v.shape()));
  const std::size_t batch = v.dim(0);
  std::vector<T> y(batch * 9);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const T* a = v.values().data() + bi * 8;
    T* f = y.data() + bi * 9;
    for (int r = 0; r < 3; ++r) {
      f[r * 3 + 0] = a[r];
      f[r * 3 + 1] = a[3 + r];
      f[r * 3 + 2] = a[6] * a[r] + a[7] * a[3 + r];
    }
  }
  return make_result<T>({batch, 3, 3}, std::move(y), {v}, [v, batch](Node<T>& n) {
    auto& dv = v.node()->ensure_grad();
    for (std::size_t bi = 0; bi < batch; ++bi) {
      const T* a = v.values().data() + bi * 8;
      const T* g = n.grad.data() + bi * 9;
      T* d = dv.data() + bi * 8;
      for (int r = 0; r < 3; ++r) {
        const T g3 = g[r * 3 + 2];
        d[r] += g[r * 3 + 0] + a[6] * g3;
        d[3 + r] += g[r * 3 + 1] + a[7] * g3;
        d[6] += g3 * a[r];
        d[7] += g3 * a[3 + r];
      }
    }
  });
}

inline constexpr double kFrobeniusEpsilon = 1e-8;

/// Per-sample m / max(||m||_F, eps) over (B, 3, 3).
template <typename T>
Tensor<T> frobenius_normalize(const Tensor<T>& m, double eps = kFrobeniusEpsilon) {
  detail::require_rank("frobenius_normalize", m.shape(), 3);
  if (m.dim(1) != 3 || m.dim(2) != 3) {
    detail::shape_error("frobenius_normalize", "expected (B, 3, 3), got " + shape_string(m.shape()));
  }
  const std::size_t batch = m.dim(0);
  auto denom = std::make_shared<std::vector<T>>(batch);
  auto guarded = std::make_shared<std::vector<char>>(batch);
  std::vector<T> y(batch * 9);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    T ss = T(0);
    for (int i = 0; i < 9; ++i) ss += m[bi * 9 + i] * m[bi * 9 + i];
    const T norm = std::sqrt(ss);
    (*guarded)[bi] = !(norm >= static_cast<T>(eps));
    (*denom)[bi] = (*guarded)[bi] ? static_cast<T>(eps) : norm;
    for (int i = 0; i < 9; ++i) y[bi * 9 + i] = m[bi * 9 + i] / (*denom)[bi];
  }
  return make_result<T>(m.shape(), std::move(y), {m}, [m, denom, guarded, batch](Node<T>& n) {
    auto& dm = m.node()->ensure_grad();
    for (std::size_t bi = 0; bi < batch; ++bi) {
      const T* g = n.grad.data() + bi * 9;
      const T* yv = n.value.data() + bi * 9;
      const T inv = T(1) / (*denom)[bi];
      T dot = T(0);
      if (!(*guarded)[bi])
        for (int i = 0; i < 9; ++i) dot += yv[i] * g[i];
      for (int i = 0; i < 9; ++i) dm[bi * 9 + i] += (g[i] - yv[i] * dot) * inv;
    }
  });
}

}  // namespace geolab::ad
