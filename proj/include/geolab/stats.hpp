#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>

#include <boost/math/distributions/students_t.hpp>

#include "geolab/error.hpp"

namespace geolab {

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  std::size_t dof = 0;
};

/// Two-sided paired t-test on a - b.
inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::LengthMismatch, "paired_t_test: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  if (a.size() < 2) throw Error(ErrorKind::LengthMismatch, "paired_t_test needs at least two pairs");
  const double n = double(a.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
  mean /= n;
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i] - mean;
    ss += d * d;
  }
  const double var = ss / (n - 1.0);
  // Variance at rounding level of the mean counts as zero.
  if (!(var > 0.0) || std::sqrt(var) <= 1e-14 * std::abs(mean)) {
    throw Error(ErrorKind::DegenerateVariance, "paired differences have zero variance");
  }
  TTestResult r;
  r.dof = a.size() - 1;
  r.t = mean / std::sqrt(var / n);
  const boost::math::students_t dist(double(r.dof));
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

struct Summary {
  double mean = 0.0;
  std::optional<double> std;  // sample std, only with >= 2 values
  std::size_t count = 0;
};

inline Summary summarize(std::span<const double> v) {
  if (v.empty()) throw Error(ErrorKind::LengthMismatch, "summarize: no values");
  Summary s;
  s.count = v.size();
  for (double x : v) s.mean += x;
  s.mean /= double(v.size());
  if (v.size() >= 2) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / double(v.size() - 1));
  }
  return s;
}

}  // namespace geolab
