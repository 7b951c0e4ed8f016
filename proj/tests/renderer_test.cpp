#include <gtest/gtest.h>

#include <chrono>

#include "peel4d/renderer.hpp"
#include "test_util.hpp"

using namespace peel4d;

namespace {

struct RandomScene {
  SplatSet<double> splats;
  PointMatrix<double> colors;
};

// Screen-space splats with random positions, depths (with deliberate ties),
// radii and densities.
RandomScene random_scene(std::mt19937_64& rng, int n, int w, int h) {
  std::uniform_real_distribution<double> u(-4, w + 3), v(-4, h + 3), r(0.5, 9), s(0.05, 1), c(0, 1);
  std::uniform_int_distribution<int> tie(0, 5);
  RandomScene sc;
  sc.splats.resize(std::size_t(n));
  sc.colors.resize(n, 3);
  for (int i = 0; i < n; ++i) {
    sc.splats.u[i] = u(rng);
    sc.splats.v[i] = v(rng);
    sc.splats.depth[i] = tie(rng) == 0 ? 2.0 : 1.0 + 4.0 * c(rng);
    sc.splats.radius_px[i] = r(rng);
    sc.splats.density[i] = s(rng);
    sc.splats.active[i] = 1;
    sc.colors.row(i) = Vec3<double>(c(rng), c(rng), c(rng)).transpose();
  }
  return sc;
}

int max_coverage(const SplatSet<double>& s, int w, int h) {
  int best = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int n = 0;
      for (std::size_t i = 0; i < s.size(); ++i) {
        const double dx = x - s.u[i], dy = y - s.v[i];
        n += dx * dx + dy * dy < s.radius_px[i] * s.radius_px[i];
      }
      best = std::max(best, n);
    }
  return best;
}

}  // namespace

TEST(Renderer, RasterizeLayerMatchesExhaustiveScan) {
  std::mt19937_64 rng(1);
  const int W = 24, H = 20;
  auto sc = random_scene(rng, 60, W, H);
  std::vector<LayerKey<double>> prev(std::size_t(W) * H, LayerKey<double>{0, -1});
  for (int pass = 0; pass < 4; ++pass) {
    const auto layer = rasterize_layer(sc.splats, W, H, std::span<const LayerKey<double>>(prev));
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const std::size_t p = std::size_t(y) * W + x;
        int best = -1;
        for (int i = 0; i < 60; ++i) {
          const double dx = x - sc.splats.u[i], dy = y - sc.splats.v[i];
          if (!(dx * dx + dy * dy < sc.splats.radius_px[i] * sc.splats.radius_px[i])) continue;
          const auto key = std::make_pair(sc.splats.depth[i], i);
          if (prev[p].point >= 0 && !(std::make_pair(prev[p].depth, prev[p].point) < key)) continue;
          if (best < 0 || key < std::make_pair(sc.splats.depth[best], best)) best = i;
        }
        ASSERT_EQ(layer[p].point, best) << "pass " << pass << " pixel " << x << "," << y;
        prev[p] = {layer[p].depth, layer[p].point};
        if (best < 0) prev[p] = {std::numeric_limits<double>::max(), std::numeric_limits<std::int32_t>::max()};
      }
  }
}

TEST(Renderer, DepthPeelEqualsRepeatedLayers) {
  std::mt19937_64 rng(2);
  const int W = 40, H = 33, K = 6;
  auto sc = random_scene(rng, 150, W, H);
  sc.splats.active[3] = 0;
  const auto buf = depth_peel(sc.splats, W, H, K);
  std::vector<LayerKey<double>> prev(std::size_t(W) * H, LayerKey<double>{0, -1});
  std::vector<std::uint8_t> done(prev.size(), 0);
  for (int k = 0; k < K; ++k) {
    const auto layer = rasterize_layer(sc.splats, W, H, std::span<const LayerKey<double>>(prev));
    for (std::size_t p = 0; p < prev.size(); ++p) {
      if (done[p] || layer[p].point < 0) {
        ASSERT_LE(buf.count[p], k);
        done[p] = 1;
        continue;
      }
      ASSERT_GT(buf.count[p], k);
      const auto& f = buf.fragments[p * K + std::size_t(k)];
      ASSERT_EQ(f.point, layer[p].point);
      ASSERT_EQ(f.alpha, layer[p].alpha);
      ASSERT_NE(f.point, 3);
      prev[p] = {layer[p].depth, layer[p].point};
    }
  }
}

TEST(Renderer, FragmentOrderIsLexicographic) {
  EXPECT_TRUE(fragment_less(1.0, 5, 2.0, 0));
  EXPECT_TRUE(fragment_less(1.0, 2, 1.0, 3));
  EXPECT_FALSE(fragment_less(1.0, 3, 1.0, 3));
  EXPECT_DOUBLE_EQ(splat_alpha(0.8, 0.0, 2.0), 0.8);
  EXPECT_DOUBLE_EQ(splat_alpha(0.8, 4.0, 2.0), 0.0);
  EXPECT_DOUBLE_EQ(splat_alpha(0.8, 2.0, 2.0), 0.4);
}

TEST(Renderer, PixelOnRimIsNotCovered) {
  SplatSet<double> s;
  s.resize(1);
  s.u[0] = 5;
  s.v[0] = 5;
  s.depth[0] = 1;
  s.radius_px[0] = 2;
  s.density[0] = 1;
  s.active[0] = 1;
  const auto buf = depth_peel(s, 11, 11, 3);
  EXPECT_EQ(buf.count[5 * 11 + 7], 0);  // distance exactly r
  EXPECT_EQ(buf.count[5 * 11 + 6], 1);
  EXPECT_EQ(buf.count[5 * 11 + 5], 1);
}

TEST(Renderer, PeelWithFullKMatchesFullSortOracle) {
  std::mt19937_64 rng(3);
  const auto t0 = std::chrono::steady_clock::now();
  for (int scene = 0; scene < 10; ++scene) {
    const int W = 32, H = 32;
    auto sc = random_scene(rng, 200, W, H);
    const int K = std::max(1, max_coverage(sc.splats, W, H));
    const Vec3<double> bg(0.2, 0.4, 0.6);
    const auto a = composite(depth_peel(sc.splats, W, H, K), sc.colors, bg);
    const auto b = oracle_full_sort_render(sc.splats, sc.colors, W, H, bg);
    for (std::size_t k = 0; k < a.raw.size(); ++k) ASSERT_NEAR(a.raw[k], b.raw[k], 1e-12);
    for (std::size_t k = 0; k < a.opacity.data.size(); ++k) ASSERT_NEAR(a.opacity.data[k], b.opacity.data[k], 1e-12);
  }
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 30.0);
}

TEST(Renderer, CompositeInvariants) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 2000; ++trial) {
    PeelBuffer<double> buf;
    const int n = 1 + int(u(rng) * 10);
    buf.reset(1, 1, n + 1);
    PointMatrix<double> colors(n + 1, 3);
    for (int k = 0; k < n; ++k) {
      buf.fragments[k] = {k, double(k), 0.0, u(rng)};
      colors.row(k) = Vec3<double>(u(rng), u(rng), u(rng)).transpose();
    }
    colors.row(n) = Vec3<double>(u(rng), u(rng), u(rng)).transpose();
    buf.count[0] = std::uint8_t(n);
    const auto base = composite(buf, colors, Vec3<double>(0.5, 0.5, 0.5));
    ASSERT_GE(base.opacity.data[0], 0.0);
    ASSERT_LE(base.opacity.data[0], 1.0);

    // Inserting an alpha = 0 fragment anywhere changes nothing.
    auto ins = buf;
    const int at = int(u(rng) * (n + 1));
    for (int k = n; k > at; --k) ins.fragments[k] = ins.fragments[k - 1];
    ins.fragments[at] = {n, 0.5, 0.0, 0.0};
    ins.count[0] = std::uint8_t(n + 1);
    const auto with0 = composite(ins, colors, Vec3<double>(0.5, 0.5, 0.5));
    for (int c = 0; c < 3; ++c) ASSERT_NEAR(with0.raw[c], base.raw[c], 1e-12);

    // An opaque front fragment hides everything behind it.
    auto front = buf;
    front.fragments[0].alpha = 1.0;
    const auto f = composite(front, colors, Vec3<double>(0.5, 0.5, 0.5));
    for (int c = 0; c < 3; ++c) ASSERT_EQ(f.raw[c], colors(front.fragments[0].point, c));
    ASSERT_EQ(f.opacity.data[0], 1.0);
  }
}

TEST(Renderer, EmptyBufferShowsBackground) {
  SplatSet<double> s;
  const auto img = composite(depth_peel(s, 4, 3, 2), PointMatrix<double>(0, 3), Vec3<double>(0.1, 0.2, 0.3));
  for (std::size_t p = 0; p < 12; ++p) {
    EXPECT_EQ(img.color.data[p * 3 + 0], 0.1);
    EXPECT_EQ(img.color.data[p * 3 + 2], 0.3);
    EXPECT_EQ(img.opacity.data[p], 0.0);
  }
}

namespace {

// Objective sum(wc * clamp(C)) + sum(wa * A) as a function of the fragment
// alphas and point colors of a fixed buffer.
double composite_objective(const PeelBuffer<double>& buf, const PointMatrix<double>& colors, const Vec3<double>& bg,
                           const std::vector<double>& wc, const std::vector<double>& wa) {
  const auto r = composite(buf, colors, bg);
  double o = 0;
  for (std::size_t k = 0; k < wc.size(); ++k) o += wc[k] * r.color.data[k];
  for (std::size_t k = 0; k < wa.size(); ++k) o += wa[k] * r.opacity.data[k];
  return o;
}

}  // namespace

TEST(Renderer, CompositeBackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  const int W = 12, H = 10;
  auto sc = random_scene(rng, 40, W, H);
  for (auto& d : sc.splats.density) d = std::min(d, 0.9);
  sc.colors *= 0.5;
  const auto buf = depth_peel(sc.splats, W, H, 8);
  const Vec3<double> bg(0.1, 0.2, 0.05);
  std::vector<double> wc(std::size_t(W) * H * 3), wa(std::size_t(W) * H);
  for (auto& x : wc) x = u(rng);
  for (auto& x : wa) x = u(rng);
  const auto res = composite(buf, sc.colors, bg);
  FragmentGrads<double> g;
  composite_backward(buf, sc.colors, bg, std::span<const double>(res.raw), std::span<const double>(wc),
                     std::span<const double>(wa), g);
  const double h = 1e-6;
  int probes = 0;
  for (std::size_t p = 0; p < buf.pixel_count(); ++p)
    for (std::size_t k = 0; k < buf.count[p]; ++k) {
      auto bp = buf, bm = buf;
      bp.fragments[p * 8 + k].alpha += h;
      bm.fragments[p * 8 + k].alpha -= h;
      const double fd = (composite_objective(bp, sc.colors, bg, wc, wa) - composite_objective(bm, sc.colors, bg, wc, wa)) / (2 * h);
      ASSERT_NEAR(g.dalpha[p * 8 + k], fd, 1e-7);
      ++probes;
    }
  EXPECT_GT(probes, 50);
  // Color gradient: sum of per-fragment contributions per point.
  PointMatrix<double> dcol = PointMatrix<double>::Zero(40, 3);
  for (std::size_t p = 0; p < buf.pixel_count(); ++p)
    for (std::size_t k = 0; k < buf.count[p]; ++k) dcol.row(buf.fragments[p * 8 + k].point) += g.dcolor[p * 8 + k].transpose();
  for (int i = 0; i < 40; i += 3)
    for (int c = 0; c < 3; ++c) {
      auto cp = sc.colors, cm = sc.colors;
      cp(i, c) += h;
      cm(i, c) -= h;
      ASSERT_NEAR(dcol(i, c), (composite_objective(buf, cp, bg, wc, wa) - composite_objective(buf, cm, bg, wc, wa)) / (2 * h), 1e-7);
    }
}

TEST(Renderer, SplatBackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-1, 1);
  const int W = 14, H = 12;
  auto sc = random_scene(rng, 25, W, H);
  for (auto& d : sc.splats.density) d = std::min(d, 0.9);
  sc.colors *= 0.4;
  std::vector<double> wc(std::size_t(W) * H * 3);
  for (auto& x : wc) x = u(rng);
  auto objective = [&](const SplatSet<double>& s) {
    return composite_objective(depth_peel(s, W, H, 30), sc.colors, Vec3<double>(0, 0, 0), wc, {});
  };
  const auto buf = depth_peel(sc.splats, W, H, 30);
  const auto res = composite(buf, sc.colors, Vec3<double>(0, 0, 0));
  FragmentGrads<double> fg;
  composite_backward(buf, sc.colors, Vec3<double>(0, 0, 0), std::span<const double>(res.raw), std::span<const double>(wc),
                     std::span<const double>(), fg);
  SplatGrads<double> sg;
  sg.reset(25);
  splat_backward(buf, sc.splats, std::span<const double>(fg.dalpha), std::span<const Vec3<double>>(fg.dcolor), sg);
  // Small steps keep the coverage set fixed for almost every probe; skip the
  // rare probe whose step crosses a pixel rim.
  const double h = 1e-7;
  int checked = 0;
  for (int i = 0; i < 25; ++i) {
    auto probe = [&](std::vector<double> SplatSet<double>::*field, double analytic) {
      auto sp = sc.splats, sm = sc.splats;
      (sp.*field)[i] += h;
      (sm.*field)[i] -= h;
      const auto bp = depth_peel(sp, W, H, 30), bm = depth_peel(sm, W, H, 30);
      if (bp.count != buf.count || bm.count != buf.count) return;
      EXPECT_NEAR(analytic, (objective(sp) - objective(sm)) / (2 * h), 1e-5) << i;
      ++checked;
    };
    probe(&SplatSet<double>::u, sg.du[i]);
    probe(&SplatSet<double>::v, sg.dv[i]);
    probe(&SplatSet<double>::radius_px, sg.dradius_px[i]);
    probe(&SplatSet<double>::density, sg.ddensity[i]);
  }
  EXPECT_GT(checked, 80);
}

TEST(Renderer, MaskCountsDynamicFragmentsOnly) {
  PeelBuffer<double> buf;
  buf.reset(1, 1, 3);
  buf.fragments[0] = {0, 1.0, 0.0, 0.5};
  buf.fragments[1] = {1, 2.0, 0.0, 0.5};
  buf.fragments[2] = {2, 3.0, 0.0, 0.5};
  buf.count[0] = 3;
  const std::vector<std::uint8_t> dyn{0, 1, 1};
  const auto m = render_mask(buf, std::span<const std::uint8_t>(dyn));
  EXPECT_DOUBLE_EQ(m.data[0], 0.75);
  const std::vector<double> dM{1.0};
  std::vector<double> da;
  render_mask_backward(buf, std::span<const std::uint8_t>(dyn), std::span<const double>(dM), da);
  EXPECT_DOUBLE_EQ(da[0], 0.0);
  EXPECT_DOUBLE_EQ(da[1], 0.5);   // d/da1 of a1 + (1-a1) a2
  EXPECT_DOUBLE_EQ(da[2], 0.5);
}

TEST(Renderer, ProjectSplatsCullsAndClamps) {
  const auto cam = look_at<double>(Vec3<double>(0, 0, 5), Vec3<double>(0, 0, 0), Vec3<double>::UnitY(), 0.8, 32, 32, 0.1, 10);
  PointMatrix<double> pos(3, 3);
  pos << 0, 0, 0, 0, 0, 6, 100, 0, 0;
  const std::vector<double> r{1e-6, 0.1, 0.1}, s{0.5, 0.5, 0.5};
  SplatSet<double> out;
  project_splats(cam, pos, std::span<const double>(r), std::span<const double>(s), out);
  EXPECT_TRUE(out.active[0]);
  EXPECT_DOUBLE_EQ(out.radius_px[0], 0.5);
  EXPECT_FALSE(out.active[1]);
  EXPECT_FALSE(out.active[2]);
}

TEST(Renderer, RejectsBadK) {
  SplatSet<double> s;
  PeelBuffer<double> b;
  PeelWorkspace<double> ws;
  EXPECT_THROW(depth_peel(s, 4, 4, 0, b, ws), ConfigError);
  EXPECT_THROW(depth_peel(s, 4, 4, 256, b, ws), ConfigError);
}
