#pragma once

// Exact two-view epipolar geometry in double precision.
//
// Convention throughout: a correspondence (p, q) has p in image 1 and q in
// image 2 and satisfies q^T F p = 0 with both points lifted to [x, y, 1].

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "geolab/error.hpp"

namespace geolab {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;

inline constexpr double kZeroNormThreshold = 1e-12;
inline constexpr double kRankTolerance = 1e-9;

/// Rank-2, unit-Frobenius 3x3 matrix. Only constructible through
/// `FundamentalMatrix::from_matrix`, which normalizes and checks rank.
class FundamentalMatrix {
 public:
  static FundamentalMatrix from_matrix(const Mat3& m) {
    const double norm = m.norm();
    if (!(norm > kZeroNormThreshold)) {
      throw Error(ErrorKind::ZeroMatrix, "Frobenius norm " + std::to_string(norm) + " <= 1e-12");
    }
    Mat3 unit = m / norm;
    if (std::abs(unit.determinant()) > kRankTolerance) {
      std::ostringstream os;
      os << "matrix is not rank 2 (|det| = " << std::abs(unit.determinant()) << ")";
      throw Error(ErrorKind::DegenerateConfiguration, os.str());
    }
    return FundamentalMatrix(unit);
  }

  const Mat3& matrix() const noexcept { return m_; }
  double operator()(int r, int c) const { return m_(r, c); }

 private:
  explicit FundamentalMatrix(const Mat3& m) : m_(m) {}
  Mat3 m_;
};

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  double skew = 0.0;

  static CameraIntrinsics identity() { return {1.0, 1.0, 0.0, 0.0, 0.0}; }

  Mat3 matrix() const {
    if (!(fx > 0.0) || !(fy > 0.0)) {
      throw Error(ErrorKind::DataError, "camera focal lengths must be positive");
    }
    Mat3 k;
    k << fx, skew, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
  }

  /// Pinhole projection of a camera-frame point.
  Vec2 project(const Vec3& x) const {
    return {fx * x.x() / x.z() + skew * x.y() / x.z() + cx, fy * x.y() / x.z() + cy};
  }
};

struct RelativePose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  /// Maps a point from camera-1 coordinates into camera-2 coordinates.
  Vec3 apply(const Vec3& x) const { return R * x + t; }
};

struct Correspondence {
  Vec2 p;  // image 1
  Vec2 q;  // image 2
};

using CorrespondenceSet = std::vector<Correspondence>;

inline Vec3 homogeneous(const Vec2& v) { return {v.x(), v.y(), 1.0}; }

/// 2D affine pixel map x -> a x + b.
struct Affine2 {
  Eigen::Matrix2d a = Eigen::Matrix2d::Identity();
  Vec2 b = Vec2::Zero();

  static Affine2 identity() { return {}; }
  static Affine2 scaling(double sx, double sy, Vec2 offset = Vec2::Zero()) {
    Affine2 out;
    out.a << sx, 0.0, 0.0, sy;
    out.b = offset;
    return out;
  }

  Vec2 apply(const Vec2& x) const { return a * x + b; }

  Mat3 homogeneous() const {
    Mat3 h = Mat3::Identity();
    h.topLeftCorner<2, 2>() = a;
    h.topRightCorner<2, 1>() = b;
    return h;
  }

  Affine2 inverse() const {
    if (std::abs(a.determinant()) < std::numeric_limits<double>::min()) {
      throw Error(ErrorKind::InvalidCrop, "affine map is not invertible");
    }
    Affine2 out;
    out.a = a.inverse();
    out.b = -(out.a * b);
    return out;
  }

  /// (this o other)(x) = this(other(x)).
  Affine2 compose(const Affine2& other) const {
    Affine2 out;
    out.a = a * other.a;
    out.b = a * other.b + b;
    return out;
  }
};

/// Resize-then-crop augmentation window.
struct CropSpec {
  int resize_w = 256;
  int resize_h = 256;
  int crop_w = 224;
  int crop_h = 224;
  double offset_x = 0.0;
  double offset_y = 0.0;

  bool valid() const {
    return crop_w > 0 && crop_h > 0 && offset_x >= 0.0 && offset_y >= 0.0 &&
           offset_x + crop_w <= resize_w && offset_y + crop_h <= resize_h;
  }
};

inline Mat3 skew_symmetric(const Vec3& t) {
  Mat3 s;
  s << 0.0, -t.z(), t.y(), t.z(), 0.0, -t.x(), -t.y(), t.x(), 0.0;
  return s;
}

/// Unit-Frobenius copy of m. Works for any non-zero matrix, rank 2 or not.
inline Mat3 normalize_frobenius(const Mat3& m) {
  const double norm = m.norm();
  if (!(norm > kZeroNormThreshold)) {
    throw Error(ErrorKind::ZeroMatrix, "Frobenius norm " + std::to_string(norm) + " <= 1e-12");
  }
  return m / norm;
}

/// F = K2^-T [t]x R K1^-1, unit-normalized.
inline FundamentalMatrix compose_fundamental(const CameraIntrinsics& k1, const CameraIntrinsics& k2,
                                             const RelativePose& pose) {
  if (!(pose.t.norm() > 1e-9)) {
    throw Error(ErrorKind::DegeneratePose, "translation norm <= 1e-9 (pure rotation has F = 0)");
  }
  const Mat3 k1_inv = k1.matrix().inverse();
  const Mat3 k2_inv = k2.matrix().inverse();
  const Mat3 f = k2_inv.transpose() * skew_symmetric(pose.t) * pose.R * k1_inv;
  return FundamentalMatrix::from_matrix(f);
}

inline double epipolar_residual(const Mat3& f, const Correspondence& c) {
  return homogeneous(c.q).dot(f * homogeneous(c.p));
}
inline double epipolar_residual(const FundamentalMatrix& f, const Correspondence& c) {
  return epipolar_residual(f.matrix(), c);
}

enum class EpipolarSide {
  Left,   // line in image 1: F^T q
  Right,  // line in image 2: F p
};

inline Vec3 epipolar_line(const Mat3& f, const Vec2& point, EpipolarSide side) {
  return side == EpipolarSide::Right ? Vec3(f * homogeneous(point))
                                     : Vec3(f.transpose() * homogeneous(point));
}
inline Vec3 epipolar_line(const FundamentalMatrix& f, const Vec2& point, EpipolarSide side) {
  return epipolar_line(f.matrix(), point, side);
}

/// Frobenius-nearest matrix of rank <= 2 (smallest singular value zeroed).
inline Mat3 enforce_rank2(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec3 sigma = svd.singularValues();
  sigma(2) = 0.0;
  return svd.matrixU() * sigma.asDiagonal() * svd.matrixV().transpose();
}

/// Pixel map from an original (w, h) image into the resized-and-cropped frame.
inline Affine2 affine_from_cropspec(const CropSpec& spec, std::pair<double, double> original_size) {
  const auto [w, h] = original_size;
  if (!spec.valid() || !(w > 0.0) || !(h > 0.0)) {
    std::ostringstream os;
    os << "crop " << spec.crop_w << "x" << spec.crop_h << " at (" << spec.offset_x << ", "
       << spec.offset_y << ") does not fit " << spec.resize_w << "x" << spec.resize_h;
    throw Error(ErrorKind::InvalidCrop, os.str());
  }
  return Affine2::scaling(spec.resize_w / w, spec.resize_h / h, Vec2(-spec.offset_x, -spec.offset_y));
}

/// F' = H2^-T F H1^-1 for pixel maps H1 (image 1) and H2 (image 2), re-normalized.
inline FundamentalMatrix adjust_f_for_transform(const FundamentalMatrix& f, const Affine2& a1,
                                                const Affine2& a2) {
  const Mat3 h1_inv = a1.inverse().homogeneous();
  const Mat3 h2_inv = a2.inverse().homogeneous();
  return FundamentalMatrix::from_matrix(h2_inv.transpose() * f.matrix() * h1_inv);
}

// ---------------------------------------------------------------------------
// Calibration text format:
//   K1: fx fy cx cy skew
//   K2: fx fy cx cy skew
//   R: r11 r12 r13 r21 r22 r23 r31 r32 r33
//   t: tx ty tz
// '#' starts a comment.

struct CameraPair {
  CameraIntrinsics k1;
  CameraIntrinsics k2;
  RelativePose pose;
};

inline CameraPair parse_calibration(std::istream& in) {
  CameraPair out;
  bool seen_k1 = false, seen_k2 = false, seen_r = false, seen_t = false;
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw Error(ErrorKind::FormatError, "calibration line " + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    std::vector<double> values;
    double v;
    while (ls >> v) values.push_back(v);
    if (!ls.eof()) fail("non-numeric value");
    auto expect = [&](std::size_t n) {
      if (values.size() != n) fail(key + " expects " + std::to_string(n) + " values");
    };
    if (key == "K1:" || key == "K2:") {
      expect(5);
      CameraIntrinsics k{values[0], values[1], values[2], values[3], values[4]};
      if (!(k.fx > 0.0) || !(k.fy > 0.0)) fail("focal lengths must be positive");
      (key == "K1:" ? out.k1 : out.k2) = k;
      (key == "K1:" ? seen_k1 : seen_k2) = true;
    } else if (key == "R:") {
      expect(9);
      for (int i = 0; i < 9; ++i) out.pose.R(i / 3, i % 3) = values[i];
      seen_r = true;
    } else if (key == "t:") {
      expect(3);
      out.pose.t = Vec3(values[0], values[1], values[2]);
      seen_t = true;
    } else {
      fail("unknown key '" + key + "'");
    }
  }
  if (!(seen_k1 && seen_k2 && seen_r && seen_t)) {
    throw Error(ErrorKind::FormatError, "calibration requires K1, K2, R and t");
  }
  return out;
}

inline CameraPair read_calibration(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IOError, "cannot open " + path);
  return parse_calibration(in);
}

inline void write_calibration(std::ostream& out, const CameraPair& pair) {
  out << std::setprecision(17);
  auto cam = [&](const char* key, const CameraIntrinsics& k) {
    out << key << ' ' << k.fx << ' ' << k.fy << ' ' << k.cx << ' ' << k.cy << ' ' << k.skew << '\n';
  };
  cam("K1:", pair.k1);
  cam("K2:", pair.k2);
  out << "R:";
  for (int i = 0; i < 9; ++i) out << ' ' << pair.pose.R(i / 3, i % 3);
  out << "\nt: " << pair.pose.t.x() << ' ' << pair.pose.t.y() << ' ' << pair.pose.t.z() << '\n';
}

inline Mat3 rotation_about_axis(const Vec3& axis, double radians) {
  return Eigen::AngleAxisd(radians, axis.normalized()).toRotationMatrix();
}

}  // namespace geolab
