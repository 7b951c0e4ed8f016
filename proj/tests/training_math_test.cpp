#include <gtest/gtest.h>

#include <numbers>

#include "peel4d/adam.hpp"
#include "peel4d/losses.hpp"
#include "peel4d/space_carve.hpp"
#include "sphere_oracle.hpp"
#include "test_util.hpp"

using namespace peel4d;

namespace {

Image<double> random_image(std::mt19937_64& rng, int w, int h, int c) {
  Image<double> img(w, h, c);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& v : img.data) v = u(rng);
  return img;
}

}  // namespace

TEST(Losses, ImageLossMatchesScalarLoop) {
  std::mt19937_64 rng(1);
  const auto a = random_image(rng, 7, 5, 3), b = random_image(rng, 7, 5, 3);
  double s = 0;
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 7; ++x)
      for (int c = 0; c < 3; ++c) s += (a(x, y, c) - b(x, y, c)) * (a(x, y, c) - b(x, y, c));
  EXPECT_NEAR(loss_img(a, b), s / 35.0, 1e-15);
  EXPECT_EQ(loss_img(a, a), 0.0);
  EXPECT_DOUBLE_EQ(loss_img(Image<double>(4, 4, 3, 0.0), Image<double>(4, 4, 3, 1.0)), 3.0);
  EXPECT_THROW(loss_img(a, Image<double>(7, 6, 3)), ConfigError);
}

TEST(Losses, PerceptualProxyProperties) {
  std::mt19937_64 rng(2);
  const auto a = random_image(rng, 16, 12, 3);
  EXPECT_EQ(loss_perceptual(a, a), 0.0);
  auto shifted = a;
  for (auto& v : shifted.data) v += 0.1;  // luma shifts by exactly 0.1
  EXPECT_NEAR(loss_perceptual(shifted, a), 0.1, 1e-12);
}

TEST(Losses, PerceptualGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const auto a = random_image(rng, 13, 10, 3), b = random_image(rng, 13, 10, 3);
  std::vector<double> g(a.data.size());
  loss_perceptual(a, b, std::span<double>(g));
  const double h = 1e-7;
  for (std::size_t k = 0; k < a.data.size(); k += 7) {
    auto p = a, m = a;
    p.data[k] += h;
    m.data[k] -= h;
    EXPECT_NEAR(g[k], (loss_perceptual(p, b) - loss_perceptual(m, b)) / (2 * h), 1e-6) << k;
  }
}

TEST(Losses, MaskLossModes) {
  std::mt19937_64 rng(4);
  const auto M = random_image(rng, 9, 9, 1);
  Image<double> gt(9, 9, 1);
  for (std::size_t i = 0; i < gt.data.size(); ++i) gt.data[i] = (i * 7) % 3 == 0;
  double outside = 0, literal = 0;
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    outside += M.data[i] * (1 - gt.data[i]);
    literal += M.data[i] * gt.data[i];
  }
  EXPECT_NEAR(loss_msk(M, gt), outside / 81, 1e-15);
  EXPECT_NEAR(loss_msk(M, gt, MaskLossMode::literal), literal / 81, 1e-15);
  EXPECT_EQ(loss_msk(Image<double>(9, 9, 1), gt), 0.0);
  // Opacity confined to the mask costs nothing under the default mode.
  EXPECT_EQ(loss_msk(gt, gt), 0.0);
}

TEST(Losses, TotalIsWeightedSumAndLinear) {
  std::mt19937_64 rng(5);
  const auto C = random_image(rng, 8, 8, 3), gt = random_image(rng, 8, 8, 3), M = random_image(rng, 8, 8, 1);
  Image<double> mask(8, 8, 1, 0.0);
  const double li = loss_img(C, gt), lp = loss_perceptual(C, gt), lm = loss_msk(M, mask);
  EXPECT_DOUBLE_EQ(total_loss(C, gt, M, mask, LossWeights{0, 0}).total, li);
  const auto t1 = total_loss(C, gt, M, mask, LossWeights{0.5, 0.25});
  EXPECT_NEAR(t1.total, li + 0.5 * lp + 0.25 * lm, 1e-14);
  const auto t2 = total_loss(C, gt, M, mask, LossWeights{1.0, 0.25});
  EXPECT_NEAR(t2.total - t1.total, 0.5 * lp, 1e-14);
  Image<double> zero(8, 8, 1, 0.0);
  EXPECT_EQ(total_loss(gt, gt, zero, mask, LossWeights{}).total, 0.0);
  // Gradients of the total.
  std::vector<double> dC(C.data.size()), dM(M.data.size());
  total_loss(C, gt, M, mask, LossWeights{0.5, 0.25}, MaskLossMode::outside_hull, std::span<double>(dC), std::span<double>(dM));
  const double h = 1e-7;
  for (std::size_t k = 0; k < C.data.size(); k += 11) {
    auto p = C, m = C;
    p.data[k] += h;
    m.data[k] -= h;
    EXPECT_NEAR(dC[k], (total_loss(p, gt, M, mask, LossWeights{0.5, 0.25}).total - total_loss(m, gt, M, mask, LossWeights{0.5, 0.25}).total) / (2 * h), 1e-6);
  }
  EXPECT_NEAR(dM[0], 0.25 / 64, 1e-15);
}

TEST(Adam, MatchesReferenceScalarAdam) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0, 1);
  const AdamConfig cfg{0.01, 0.9, 0.999, 1e-8};
  std::vector<double> p(5);
  for (auto& x : p) x = n(rng);
  auto ref = p;
  std::vector<double> m(5, 0), v(5, 0);
  AdamState<double> st(5);
  for (int t = 1; t <= 100; ++t) {
    std::vector<double> g(5);
    for (auto& x : g) x = n(rng);
    adam_step(std::span<double>(p), std::span<const double>(g), st, cfg);
    for (int i = 0; i < 5; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(p[i], ref[i], 1e-12);
}

TEST(Adam, ZeroAndConstantGradients) {
  const AdamConfig cfg{0.001, 0.9, 0.999, 1e-8};
  std::vector<double> p{1.0, -2.0}, zero{0.0, 0.0};
  AdamState<double> st(2);
  st.m = {0.5, 0.5};
  st.v = {0.1, 0.1};
  std::vector<double> q{3.0, 4.0};
  AdamState<double> s2(2);
  adam_step(std::span<double>(q), std::span<const double>(zero), s2, cfg);
  EXPECT_EQ(q[0], 3.0);
  EXPECT_EQ(q[1], 4.0);
  adam_step(std::span<double>(p), std::span<const double>(zero), st, cfg);
  EXPECT_DOUBLE_EQ(st.m[0], 0.45);
  EXPECT_DOUBLE_EQ(st.v[0], 0.0999);
  // Constant gradient: every step moves by ~lr against the gradient's sign.
  std::vector<double> r{0.0}, g{3.7};
  AdamState<double> s3(1);
  double prev = 0;
  for (int t = 0; t < 500; ++t) {
    adam_step(std::span<double>(r), std::span<const double>(g), s3, cfg);
    EXPECT_NEAR(prev - r[0], 0.001, 1e-8);
    prev = r[0];
  }
}

TEST(SpaceCarve, SphereHullContainment) {
  const auto rig = test::sphere_rig(0.5, 8, 256);
  const BBox<double> box(Vec3<double>(-1, -1, -1), Vec3<double>(1, 1, 1));
  const auto hull = carve_hull<double>(rig.masks, rig.cams, box, 64);
  const auto check = test::check_sphere_hull(hull, rig.radius);
  EXPECT_GT(check.interior, 10000u);
  EXPECT_EQ(check.interior_missing, 0u);
  EXPECT_EQ(check.outside_dilation, 0u) << "of " << check.carved;
}

TEST(SpaceCarve, AllOnesKeepsWholeBoxAndEmitsShell) {
  const auto rig = test::sphere_rig(0.5, 4, 32);
  std::vector<Image<float>> ones(4, Image<float>(32, 32, 1, 1.f));
  const BBox<double> box(Vec3<double>(-0.3, -0.3, -0.3), Vec3<double>(0.3, 0.3, 0.3));
  const auto hull = carve_hull<double>(ones, rig.cams, box, 8);
  EXPECT_EQ(hull.count(), 512u);
  const auto f = space_carve<double>(ones, rig.cams, box, 8);
  EXPECT_EQ(f.size(), 512 - 6 * 6 * 6);
}

TEST(SpaceCarve, OutputProjectsInsideEveryMaskAndIsOrderInvariant) {
  auto rig = test::sphere_rig(0.4, 6, 64);
  const BBox<double> box(Vec3<double>(-1, -1, -1), Vec3<double>(1, 1, 1));
  const auto f = space_carve<double>(rig.masks, rig.cams, box, 32);
  for (Eigen::Index i = 0; i < f.size(); ++i)
    for (std::size_t v = 0; v < rig.cams.size(); ++v) {
      bool seen = false;
      EXPECT_TRUE(mask_accepts(rig.cams[v], rig.masks[v], f.point(i), seen));
    }
  std::reverse(rig.cams.begin(), rig.cams.end());
  std::reverse(rig.masks.begin(), rig.masks.end());
  const auto g = space_carve<double>(rig.masks, rig.cams, box, 32);
  EXPECT_EQ(f.positions, g.positions);
}

TEST(SpaceCarve, EmptyResultNamesTheView) {
  const auto rig = test::sphere_rig(0.4, 3, 32);
  auto masks = rig.masks;
  masks[1] = Image<float>(32, 32, 1, 0.f);
  const BBox<double> box(Vec3<double>(-0.3, -0.3, -0.3), Vec3<double>(0.3, 0.3, 0.3));
  try {
    space_carve<double>(masks, rig.cams, box, 16);
    FAIL() << "expected InitializationError";
  } catch (const InitializationError& e) {
    EXPECT_NE(std::string(e.what()).find("view 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(space_carve<double>(std::span<const Image<float>>(masks.data(), 1), std::span<const Camera<double>>(rig.cams.data(), 1), box, 16), ConfigError);
  EXPECT_THROW(space_carve<double>(masks, rig.cams, box, 4), ConfigError);
}
