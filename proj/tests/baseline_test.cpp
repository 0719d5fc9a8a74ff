#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "geolab/baseline.hpp"
#include "geolab/data.hpp"

using namespace geolab;

namespace {

double sign_adjusted_distance(const Mat3& a, const Mat3& b) { return std::min((a - b).norm(), (a + b).norm()); }

double mean_sed(const Mat3& f, std::span<const Correspondence> c) { return sed(f, c) / double(c.size()); }

}  // namespace

TEST(Hartley, CenteredCloudAndOracle) {
  const std::vector<Vec2> unit{{1, 1}, {-1, -1}, {1, -1}, {-1, 1}};
  const auto n = hartley_normalize(unit);
  EXPECT_LT((n.transform.a - Eigen::Matrix2d::Identity()).norm(), 1e-12);
  EXPECT_LT(n.transform.b.norm(), 1e-12);

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 320);
  for (int t = 0; t < 100; ++t) {
    std::vector<Vec2> pts(30);
    for (auto& p : pts) p = {u(rng), u(rng) * 0.75};
    const auto out = hartley_normalize(pts);
    Vec2 c = Vec2::Zero();
    double d = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const Vec2 direct = out.transform.a * pts[i] + out.transform.b;
      EXPECT_LT((direct - out.points[i]).norm(), 1e-12);
      c += direct;
    }
    c /= 30.0;
    for (const auto& p : out.points) d += (p - c).norm();
    EXPECT_LT(c.norm(), 1e-12);
    EXPECT_NEAR(d / 30.0, std::sqrt(2.0), 1e-9);
  }
  const std::vector<Vec2> same(5, Vec2(3, 4));
  try {
    hartley_normalize(same);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateSet);
  }
}

TEST(EightPoint, ExactRecovery) {
  std::mt19937_64 rng(2);
  StereoConfig cfg;
  cfg.n_points = 20;
  for (int i = 0; i < 100; ++i) {
    const StereoScene s = gen_stereo_scene(rng, cfg);
    const FundamentalMatrix est = eight_point(s.corrs);
    EXPECT_LT(sign_adjusted_distance(est.matrix(), s.f.matrix()), 1e-6);
    EXPECT_LT(sed(est, s.corrs), 1e-9);
    EXPECT_LT(std::abs(est.matrix().determinant()), 1e-10);
    EXPECT_NEAR(est.matrix().norm(), 1.0, 1e-12);
  }
}

TEST(EightPoint, ErrorsAndDegeneracy) {
  std::mt19937_64 rng(3);
  const StereoScene s = gen_stereo_scene(rng, {});
  try {
    eight_point(std::span(s.corrs).first(7));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::TooFewPoints);
  }
  StereoConfig planar;
  planar.planar = true;
  const StereoScene p = gen_stereo_scene(rng, planar);
  try {
    eight_point(p.corrs);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateConfiguration);
  }
}

TEST(EightPoint, NoisyWithinThreeTimesGroundTruth) {
  std::mt19937_64 rng(4);
  StereoConfig cfg;
  cfg.noise_px = 0.5;
  for (int i = 0; i < 20; ++i) {
    const StereoScene s = gen_stereo_scene(rng, cfg);
    const FundamentalMatrix est = eight_point(s.corrs);
    EXPECT_LT(mean_sed(est.matrix(), s.corrs), 3.0 * mean_sed(s.f.matrix(), s.corrs));
  }
}

TEST(EightPoint, SimilarityInvariance) {
  std::mt19937_64 rng(5);
  const StereoScene s = gen_stereo_scene(rng, StereoConfig{.noise_px = 0.3});
  const FundamentalMatrix base = eight_point(s.corrs);
  const double ang = 0.3;
  Affine2 sim;
  sim.a << 2.0 * std::cos(ang), -2.0 * std::sin(ang), 2.0 * std::sin(ang), 2.0 * std::cos(ang);
  sim.b = Vec2(17, -40);
  CorrespondenceSet moved = s.corrs;
  for (auto& c : moved) c.p = sim.apply(c.p);
  const FundamentalMatrix est = eight_point(moved);
  const FundamentalMatrix expect = adjust_f_for_transform(base, sim, Affine2::identity());
  EXPECT_LT(sign_adjusted_distance(est.matrix(), expect.matrix()), 1e-9);
}

TEST(Ransac, NoOutliersEqualsEightPoint) {
  std::mt19937_64 rng(6);
  const StereoScene s = gen_stereo_scene(rng, {});
  const auto r = ransac_f(s.corrs, {200, 0.01, 1});
  EXPECT_EQ(r.inlier_count, s.corrs.size());
  EXPECT_LT((r.f.matrix() - eight_point(s.corrs).matrix()).norm(), 1e-9);
  const auto again = ransac_f(s.corrs, {200, 0.01, 1});
  EXPECT_EQ(again.f.matrix(), r.f.matrix());
}

TEST(Ransac, RecoversInliersUnderOutliers) {
  std::mt19937_64 rng(7);
  StereoConfig cfg;
  cfg.outlier_frac = 0.3;
  int good = 0;
  for (int i = 0; i < 50; ++i) {
    const StereoScene s = gen_stereo_scene(rng, cfg);
    const auto r = ransac_f(s.corrs, {2000, 0.01, std::uint64_t(i)});
    std::size_t truth = 0, hit = 0;
    for (std::size_t k = 0; k < s.corrs.size(); ++k)
      if (!s.outlier_mask[k]) {
        ++truth;
        hit += r.inliers[k];
      }
    if (double(hit) >= 0.95 * double(truth)) ++good;
  }
  EXPECT_GE(good, 48);
}

TEST(Ransac, AllOutliersFail) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> x(0, 320), y(0, 240);
  CorrespondenceSet junk(60);
  for (auto& c : junk) c = {{x(rng), y(rng)}, {x(rng), y(rng)}};
  try {
    ransac_f(junk, {2000, 0.01, 3});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ConsensusFailure);
  }
  EXPECT_THROW(ransac_f(std::span(junk).first(7), {}), Error);
}
