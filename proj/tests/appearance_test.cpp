#include <gtest/gtest.h>

#include "peel4d/appearance.hpp"
#include "test_util.hpp"

using namespace peel4d;

TEST(Appearance, SourceSelectionMatchesBruteForce) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Camera<double>> cams;
    for (int v = 0; v < 9; ++v) cams.push_back(test::random_camera<double>(rng, 16, 16));
    cams.push_back(cams[2]);  // exact tie with view 2
    const auto target = test::random_camera<double>(rng, 16, 16);
    const Vec3<double> anchor(0.05, -0.02, 0.0);
    const int exclude = trial % 3 == 0 ? 4 : -1;
    const auto got = select_source_views<double>(target, cams, 4, anchor, exclude);
    // Brute force: repeatedly take the smallest angle, lowest index first.
    std::vector<int> expect;
    std::vector<bool> taken(cams.size(), false);
    const Vec3<double> dt = (target.center() - anchor).normalized();
    for (int k = 0; k < 4; ++k) {
      int best = -1;
      double best_angle = 1e9;
      for (int v = 0; v < int(cams.size()); ++v) {
        if (taken[v] || v == exclude) continue;
        const double ang = std::acos(std::clamp(dt.dot((cams[v].center() - anchor).normalized()), -1.0, 1.0));
        if (ang < best_angle) {
          best_angle = ang;
          best = v;
        }
      }
      taken[best] = true;
      expect.push_back(best);
    }
    EXPECT_EQ(got, expect);
  }
  std::vector<Camera<double>> two{test::random_camera<double>(rng, 8, 8), test::random_camera<double>(rng, 8, 8)};
  EXPECT_EQ(select_source_views<double>(two[0], two, 4, Vec3<double>(0, 0, 0)).size(), 2u);
  EXPECT_EQ(select_source_views<double>(two[0], two, 4, Vec3<double>(0, 0, 0), 0), std::vector<int>{1});
}

TEST(Appearance, BlendIsSoftmaxOverVisibleViews) {
  std::vector<ViewSample<double>> vs(4);
  vs[0] = {true, Vec3<double>(1, 0, 0), 0.0};
  vs[1] = {false, Vec3<double>(0, 1, 0), invisible_logit<double>()};
  vs[2] = {true, Vec3<double>(0, 0, 1), std::log(3.0)};
  vs[3] = {false, Vec3<double>(1, 1, 1), invisible_logit<double>()};
  std::vector<double> w(4);
  const auto b = ibr_blend<double>(vs, w);
  EXPECT_FALSE(b.sh_only);
  EXPECT_NEAR(w[0], 0.25, 1e-15);
  EXPECT_NEAR(w[2], 0.75, 1e-15);
  EXPECT_EQ(w[1], 0.0);
  EXPECT_EQ(w[3], 0.0);
  EXPECT_NEAR(b.color.x(), 0.25, 1e-15);
  EXPECT_NEAR(b.color.z(), 0.75, 1e-15);
  // Large logits stay finite.
  vs[0].logit = 800;
  vs[2].logit = 801;
  ibr_blend<double>(vs, w);
  EXPECT_TRUE(std::isfinite(w[0]) && std::isfinite(w[2]));
  EXPECT_NEAR(w[0] + w[2], 1.0, 1e-15);
}

TEST(Appearance, NoVisibleViewFallsBackToShOnly) {
  std::vector<ViewSample<double>> vs(3);
  std::vector<double> w(3);
  const auto b = ibr_blend<double>(vs, w);
  EXPECT_TRUE(b.sh_only);
  EXPECT_EQ(b.color, Vec3<double>(0, 0, 0));
  EXPECT_EQ(point_color(b.color, Vec3<double>(0.2, 0.3, 0.4)), Vec3<double>(0.2, 0.3, 0.4));
}

TEST(Appearance, BlendBackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<ViewSample<double>> vs(5);
  for (int i = 0; i < 5; ++i) vs[i] = {i != 3, Vec3<double>(u(rng), u(rng), u(rng)), i != 3 ? 2 * u(rng) : invisible_logit<double>()};
  const Vec3<double> dc(u(rng), u(rng), u(rng));
  std::vector<double> w(5), dl(5);
  std::vector<Vec3<double>> dcol(5);
  ibr_blend<double>(vs, w);
  ibr_blend_backward<double>(vs, w, dc, dl, dcol);
  auto obj = [&](const std::vector<ViewSample<double>>& v) {
    std::vector<double> ww(5);
    return dc.dot(ibr_blend<double>(v, ww).color);
  };
  const double h = 1e-6;
  for (int i = 0; i < 5; ++i) {
    if (!vs[i].visible) {
      EXPECT_EQ(dl[i], 0.0);
      continue;
    }
    auto p = vs, m = vs;
    p[i].logit += h;
    m[i].logit -= h;
    EXPECT_NEAR(dl[i], (obj(p) - obj(m)) / (2 * h), 1e-8);
    for (int c = 0; c < 3; ++c) {
      auto pc = vs, mc = vs;
      pc[i].color[c] += h;
      mc[i].color[c] -= h;
      EXPECT_NEAR(dcol[i][c], (obj(pc) - obj(mc)) / (2 * h), 1e-8);
    }
  }
}

TEST(Appearance, IbrColorSkipsViewsThatCannotSeeThePoint) {
  std::mt19937_64 rng(3);
  HeadConfig cfg;
  cfg.feature_dim = 6;
  HeadSet<double> h(cfg);
  h.init(rng);
  Image<float> red(16, 16, 3), blue(16, 16, 3);
  for (int p = 0; p < 256; ++p) {
    red.data[p * 3] = 1.f;
    blue.data[p * 3 + 2] = 1.f;
  }
  const auto front = look_at<double>(Vec3<double>(0, 0, 3), Vec3<double>(0, 0, 0), Vec3<double>::UnitY(), 0.8, 16, 16);
  const auto away = look_at<double>(Vec3<double>(0, 0, 3), Vec3<double>(0, 0, 6), Vec3<double>::UnitY(), 0.8, 16, 16);
  std::vector<SourceView<double>> sel{{front, &red}, {away, &blue}};
  std::vector<ViewSample<double>> samples;
  const auto b = ibr_color<double>(h, Vec3<double>(0, 0, 0), Vector<double>::Zero(6), sel, &samples);
  EXPECT_TRUE(samples[0].visible);
  EXPECT_FALSE(samples[1].visible);
  EXPECT_EQ(samples[1].logit, invisible_logit<double>());
  EXPECT_NEAR(b.color.x(), 1.0, 1e-12);
  EXPECT_NEAR(b.color.z(), 0.0, 1e-12);
}
