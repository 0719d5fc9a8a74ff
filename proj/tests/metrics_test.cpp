#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "geolab/metrics.hpp"

using namespace geolab;

namespace {

Mat3 canonical_f() {
  Mat3 f;
  f << 0, 0, 0, 0, 0, -1, 0, 1, 0;
  return f / std::sqrt(2.0);
}

struct Scene {
  FundamentalMatrix f;
  CorrespondenceSet exact;
  CorrespondenceSet noisy;
};

Scene make_scene(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const CameraIntrinsics k{450, 440, 160, 120, 0};
  RelativePose pose;
  pose.R = rotation_about_axis(Vec3(0.1, 1, 0.05), 0.07);
  pose.t = Vec3(0.6, 0.05, 0.1);
  std::uniform_real_distribution<double> xy(-2, 2), z(4, 20);
  std::normal_distribution<double> noise(0.0, 0.7);
  Scene s{compose_fundamental(k, k, pose), {}, {}};
  for (int i = 0; i < 40; ++i) {
    const Vec3 x(xy(rng), xy(rng), z(rng));
    Correspondence c{k.project(x), k.project(pose.apply(x))};
    s.exact.push_back(c);
    c.q += Vec2(noise(rng), noise(rng));
    s.noisy.push_back(c);
  }
  return s;
}

// Direct transcription of the symmetric epipolar distance for one pair,
// written without the library's line helpers.
double sed_oracle(const Mat3& f, const Correspondence& c) {
  const double p[3] = {c.p.x(), c.p.y(), 1.0}, q[3] = {c.q.x(), c.q.y(), 1.0};
  double fp[3] = {0, 0, 0}, ftq[3] = {0, 0, 0};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      fp[i] += f(i, j) * p[j];
      ftq[j] += f(i, j) * q[i];
    }
  const double r = q[0] * fp[0] + q[1] * fp[1] + q[2] * fp[2];
  return (1.0 / (fp[0] * fp[0] + fp[1] * fp[1]) + 1.0 / (ftq[0] * ftq[0] + ftq[1] * ftq[1])) * r * r;
}

}  // namespace

TEST(Sed, HandDerivedSinglePair) {
  const CorrespondenceSet one{{{0, 0}, {0, 1}}};
  EXPECT_NEAR(sed(canonical_f(), one), 2.0, 1e-12);
  EXPECT_NEAR(sed_point(canonical_f(), one[0]), 2.0, 1e-12);
  EXPECT_NEAR(algebraic_distance(canonical_f(), one), 1.0 / std::sqrt(2.0), 1e-12);
}

TEST(Sed, ExactCorrespondencesGiveZero) {
  const Scene s = make_scene(1);
  EXPECT_LT(sed(s.f, s.exact), 1e-9);
  EXPECT_LT(algebraic_distance(s.f, s.exact), 1e-9);
}

TEST(Sed, ScaleInvariantAndSumOfPoints) {
  const Scene s = make_scene(2);
  const double base = sed(s.f, s.noisy);
  EXPECT_GT(base, 0.0);
  for (double k : {0.1, 10.0, -3.0}) {
    EXPECT_NEAR(sed(Mat3(k * s.f.matrix()), s.noisy), base, 1e-12 * base);
  }
  double total = 0.0;
  for (const auto& c : s.noisy) {
    const double sp = sed_point(s.f, c);
    EXPECT_NEAR(sp, sed_oracle(s.f.matrix(), c), 1e-12 * std::max(1.0, sp));
    total += sp;
  }
  EXPECT_NEAR(total, base, 1e-12 * base);
}

TEST(Sed, PermutationInvariant) {
  Scene s = make_scene(3);
  const double base = sed(s.f, s.noisy);
  const double ad = algebraic_distance(s.f, s.noisy);
  std::mt19937_64 rng(4);
  std::shuffle(s.noisy.begin(), s.noisy.end(), rng);
  EXPECT_NEAR(sed(s.f, s.noisy), base, 1e-12 * base);
  EXPECT_NEAR(algebraic_distance(s.f, s.noisy), ad, 1e-12 * ad);
}

TEST(Sed, DegenerateAndEmpty) {
  const CorrespondenceSet one{{{0, 0}, {0, 1}}};
  try {
    sed(Mat3::Zero(), one);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateLine);
  }
  EXPECT_THROW(sed(canonical_f(), CorrespondenceSet{}), Error);
}

TEST(AlgebraicDistance, AbsolutelyHomogeneous) {
  const Scene s = make_scene(5);
  const double ad = algebraic_distance(s.f, s.noisy);
  for (double k : {0.25, 4.0, -2.0}) {
    EXPECT_NEAR(algebraic_distance(Mat3(k * s.f.matrix()), s.noisy), std::abs(k) * ad, 1e-12 * ad * std::abs(k));
  }
}

TEST(Mse, Basics) {
  const std::vector<double> a{0, 0}, b{1, 1};
  EXPECT_EQ(mse(a, a), 0.0);
  EXPECT_EQ(mse(a, b), 1.0);
  EXPECT_THROW(mse(a, std::vector<double>{1.0}), Error);

  std::mt19937_64 rng(6);
  std::normal_distribution<double> n;
  std::vector<double> x(37), y(37);
  for (auto& v : x) v = n(rng);
  for (auto& v : y) v = n(rng);
  double s = 0;
  for (int i = 0; i < 37; ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  EXPECT_NEAR(mse(x, y), s / 37, 1e-14);
}

TEST(Huber, BranchesAndContinuity) {
  const std::vector<double> zero{0.0};
  EXPECT_DOUBLE_EQ(huber(std::vector<double>{0.5}, zero, 1.0), 0.125);
  EXPECT_DOUBLE_EQ(huber(std::vector<double>{2.0}, zero, 1.0), 1.5);
  for (double d : {0.3, 1.0, 2.5}) {
    EXPECT_NEAR(huber_term(d, d), 0.5 * d * d, 1e-15);
    EXPECT_NEAR(huber_term(std::nextafter(d, 10.0), d), 0.5 * d * d, 1e-12);
  }
  EXPECT_THROW(huber(zero, std::vector<double>{0, 0}, 1.0), Error);
}

TEST(Huber, BoundedByHalfSquare) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0, 3);
  for (int i = 0; i < 1000; ++i) {
    const double e = n(rng);
    const double h = huber_term(e, 1.0);
    EXPECT_LE(h, 0.5 * e * e + 1e-15);
    if (std::abs(e) <= 1.0) EXPECT_EQ(h, 0.5 * e * e);
    else EXPECT_LT(h, 0.5 * e * e);
  }
}

TEST(L2Translation, Cases) {
  const std::vector<Vec2> a{{0, 0}}, b{{3, 4}};
  EXPECT_EQ(l2_translation_error(a, a), 0.0);
  EXPECT_DOUBLE_EQ(l2_translation_error(a, b), 5.0);

  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(-32, 32);
  std::vector<Vec2> p(50), g(50);
  double s = 0;
  for (int i = 0; i < 50; ++i) {
    p[i] = {u(rng), u(rng)};
    g[i] = {u(rng), u(rng)};
    s += std::sqrt((p[i].x() - g[i].x()) * (p[i].x() - g[i].x()) + (p[i].y() - g[i].y()) * (p[i].y() - g[i].y()));
  }
  EXPECT_NEAR(l2_translation_error(p, g), s / 50, 1e-12);
}

TEST(AngleMae, Cases) {
  EXPECT_EQ(angle_mae(std::vector<double>{3.0}, std::vector<double>{3.0}), 0.0);
  EXPECT_DOUBLE_EQ(angle_mae(std::vector<double>{10.0}, std::vector<double>{-5.0}), 15.0);
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-30, 30);
  std::vector<double> p(40), g(40);
  double s = 0;
  for (int i = 0; i < 40; ++i) {
    p[i] = u(rng);
    g[i] = u(rng);
    s += std::abs(p[i] - g[i]);
  }
  EXPECT_NEAR(angle_mae(p, g), s / 40, 1e-12);
}

TEST(RigidLoss, Cases) {
  const LossWeights w;
  EXPECT_EQ(rigid_loss({0.2, -0.1, 0.3}, {0.2, -0.1, 0.3}, w), 0.0);
  EXPECT_DOUBLE_EQ(rigid_loss({0.5, 0.1, 0.1}, {0.0, 0.1, 0.1}, w), 0.375);

  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int i = 0; i < 100; ++i) {
    const RigidVector p{u(rng), u(rng), u(rng)}, g{u(rng), u(rng), u(rng)};
    const double ea = p[0] - g[0], ex = p[1] - g[1], ey = p[2] - g[2];
    const double angle = ea * ea + huber_term(ea, 1.0);
    const double shift = (ex * ex + ey * ey) / 2 + (huber_term(ex, 1.0) + huber_term(ey, 1.0)) / 2;
    EXPECT_NEAR(rigid_loss(p, g, w), angle + 10.0 * shift, 1e-12);
  }
}

TEST(FTotalLoss, Cases) {
  const Scene s = make_scene(14);
  const LossWeights w;
  EXPECT_LT(f_total_loss(s.f.matrix(), s.f, s.exact, w), 1e-9);

  LossWeights no_sed = w;
  no_sed.beta_f = 0.0;
  std::mt19937_64 rng(15);
  std::normal_distribution<double> n(0, 0.01);
  Mat3 pert = s.f.matrix();
  for (int i = 0; i < 9; ++i) pert(i / 3, i % 3) += n(rng);
  pert = normalize_frobenius(pert);
  double sq = 0, hub = 0;
  for (int i = 0; i < 9; ++i) {
    const double e = pert(i / 3, i % 3) - s.f(i / 3, i % 3);
    sq += e * e;
    hub += huber_term(e, 1.0);
  }
  EXPECT_NEAR(f_total_loss(pert, s.f, s.exact, no_sed), sq / 9 + hub / 9, 1e-15);
  double sed_sum = 0;
  for (const auto& c : s.exact) sed_sum += sed_oracle(pert, c);
  EXPECT_NEAR(f_total_loss(pert, s.f, s.exact, w), sq / 9 + hub / 9 + 10.0 * sed_sum,
              1e-10 * (1 + sed_sum));
}
