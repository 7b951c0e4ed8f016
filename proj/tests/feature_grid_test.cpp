#include <gtest/gtest.h>

#include "peel4d/feature_grid.hpp"
#include "peel4d/scene.hpp"

using namespace peel4d;

namespace {

FeaturePlaneSet<double> random_planes(std::uint64_t seed, int res = 5, int time_res = 3, int ch = 2) {
  FeaturePlaneSet<double> s(FeatureGridConfig{res, time_res, ch});
  std::mt19937_64 rng(seed);
  s.init_uniform(rng, 1.0);
  return s;
}

// Textbook bilinear interpolation on one plane/channel, written from scratch.
double scalar_bilinear(const FeaturePlane<double>& pl, int ch, double a, double b) {
  const double pa = std::clamp(a, 0.0, 1.0) * (pl.rows - 1), pb = std::clamp(b, 0.0, 1.0) * (pl.cols - 1);
  const int i = std::min(int(std::floor(pa)), pl.rows - 2), j = std::min(int(std::floor(pb)), pl.cols - 2);
  const double fa = pa - i, fb = pb - j;
  auto at = [&](int r, int c) { return pl.data[(std::size_t(r) * pl.cols + c) * pl.channels + ch]; };
  return (1 - fa) * ((1 - fb) * at(i, j) + fb * at(i, j + 1)) + fa * ((1 - fb) * at(i + 1, j) + fb * at(i + 1, j + 1));
}

}  // namespace

TEST(FeatureGrid, SampleMatchesScalarBilinear) {
  const auto s = random_planes(1);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 500; ++trial) {
    const Vec4<double> q(u(rng), u(rng), u(rng), u(rng));
    const auto f = sample(s, q);
    ASSERT_EQ(f.size(), 12);
    for (int p = 0; p < 6; ++p)
      for (int c = 0; c < 2; ++c)
        EXPECT_NEAR(f[p * 2 + c], scalar_bilinear(s.planes[p], c, q[kPlaneAxes[p][0]], q[kPlaneAxes[p][1]]), 1e-13);
  }
}

TEST(FeatureGrid, NodesAndCornersReproduceStoredValues) {
  const auto s = random_planes(3);
  // q = (0.25, 0.5, 1, 0): x on node 1 of 5, y on node 2, z on the last node, t on the first.
  const auto f = sample(s, Vec4<double>(0.25, 0.5, 1.0, 0.0));
  EXPECT_DOUBLE_EQ(f[0], s.planes[0].node(1, 2)[0]);  // xy
  EXPECT_DOUBLE_EQ(f[2], s.planes[1].node(1, 4)[0]);  // xz
  EXPECT_DOUBLE_EQ(f[6], s.planes[3].node(0, 1)[0]);  // tx
  // Out-of-range coordinates clamp to the border.
  const auto g = sample(s, Vec4<double>(-3, 2, 0.5, 0.5));
  const auto h = sample(s, Vec4<double>(0, 1, 0.5, 0.5));
  for (int k = 0; k < g.size(); ++k) EXPECT_EQ(g[k], h[k]);
}

TEST(FeatureGrid, InteriorNodeTiesUseLowerCell) {
  const auto c = detail::locate(0.5, 5);  // position 2.0
  EXPECT_EQ(c.i0, 1);
  EXPECT_DOUBLE_EQ(c.frac, 1.0);
  const auto z = detail::locate(0.0, 5);
  EXPECT_EQ(z.i0, 0);
  EXPECT_DOUBLE_EQ(z.frac, 0.0);
  const auto o = detail::locate(1.0, 5);
  EXPECT_EQ(o.i0, 3);
  EXPECT_DOUBLE_EQ(o.frac, 1.0);
}

TEST(FeatureGrid, BackwardMatchesFiniteDifferences) {
  auto s = random_planes(4);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.05, 0.95), g(-1, 1);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec4<double> q(u(rng), u(rng), u(rng), u(rng));
    std::vector<double> df(12);
    for (auto& v : df) v = g(rng);
    auto objective = [&](const FeaturePlaneSet<double>& set, const Vec4<double>& qq) {
      const auto f = sample(set, qq);
      double o = 0;
      for (int k = 0; k < 12; ++k) o += df[k] * f[k];
      return o;
    };
    FeaturePlaneSet<double> grad = s;
    grad.set_zero();
    const Vec4<double> dq = sample_backward(s, q, std::span<const double>(df), grad);
    for (int a = 0; a < 4; ++a) {
      Vec4<double> e = Vec4<double>::Zero();
      e[a] = 1e-6;
      const double fd = (objective(s, q + e) - objective(s, q - e)) / 2e-6;
      EXPECT_NEAR(dq[a], fd, 1e-6);
    }
    for (int p = 0; p < 6; ++p)
      for (std::size_t k = 0; k < s.planes[p].data.size(); k += 3) {
        auto sp = s, sm = s;
        sp.planes[p].data[k] += 1e-6;
        sm.planes[p].data[k] -= 1e-6;
        EXPECT_NEAR(grad.planes[p].data[k], (objective(sp, q) - objective(sm, q)) / 2e-6, 1e-7);
      }
  }
}

TEST(FeatureGrid, ZeroPlanesGiveZeroFeatures) {
  FeaturePlaneSet<double> s(FeatureGridConfig{8, 2, 4});
  const auto f = sample(s, Vec4<double>(0.3, 0.6, 0.9, 0.1));
  EXPECT_EQ(f.size(), 24);
  EXPECT_EQ(f.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(FeaturePlane<double>(1, 4, 2), ConfigError);
}

TEST(Scene, NormalizeCoordsAndTime) {
  BBox<double> box(Vec3<double>(-1, 0, 2), Vec3<double>(1, 4, 3));
  const auto n = normalize_coords(box, Vec3<double>(0, 1, 2.5), 0.25);
  EXPECT_DOUBLE_EQ(n.q[0], 0.5);
  EXPECT_DOUBLE_EQ(n.q[1], 0.25);
  EXPECT_DOUBLE_EQ(n.q[2], 0.5);
  EXPECT_DOUBLE_EQ(n.q[3], 0.25);
  EXPECT_DOUBLE_EQ(SceneSequence<double>::normalized_time(9, 10), 1.0);
  EXPECT_DOUBLE_EQ(SceneSequence<double>::normalized_time(0, 1), 0.0);
  EXPECT_EQ(frame_for_time(0.5, 10), 5);
  EXPECT_EQ(frame_for_time(2.0, 10), 9);
  EXPECT_EQ(frame_for_time(-1.0, 10), 0);
  EXPECT_THROW(BBox<double>(Vec3<double>(0, 0, 0), Vec3<double>(1, 0, 1)), ConfigError);
}
