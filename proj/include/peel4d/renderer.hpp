#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "peel4d/camera.hpp"
#include "peel4d/image.hpp"
#include "peel4d/parallel.hpp"
#include "peel4d/scene.hpp"

namespace peel4d {

inline constexpr int kTileSize = 16;

// Screen-space splats for one target camera. Points with active == 0 are
// behind the clip range or entirely off screen and never produce fragments.
template <class T>
struct SplatSet {
  std::vector<T> u, v, depth, radius_px, density;
  std::vector<std::uint8_t> active;

  std::size_t size() const { return u.size(); }
  void resize(std::size_t n) {
    u.resize(n);
    v.resize(n);
    depth.resize(n);
    radius_px.resize(n);
    density.resize(n);
    active.resize(n);
  }
};

// Projects world-space splats (position, world radius, density) into `cam`.
template <class T>
void project_splats(const Camera<T>& cam, const PointMatrix<T>& positions, std::span<const T> radius_world,
                    std::span<const T> density, SplatSet<T>& out, RadiusLimits<T> lim = {}) {
  const std::size_t n = static_cast<std::size_t>(positions.rows());
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3<T> x = positions.row(Eigen::Index(i)).transpose();
    const Vec3<T> xc = cam.R * x + cam.t;
    const T z = xc.z();
    out.depth[i] = z;
    out.density[i] = density[i];
    if (!(z >= cam.near && z <= cam.far)) {
      out.active[i] = 0;
      out.u[i] = out.v[i] = out.radius_px[i] = T(0);
      continue;
    }
    out.u[i] = cam.fx * xc.x() / z + cam.cx;
    out.v[i] = cam.fy * xc.y() / z + cam.cy;
    const T r = projected_radius(cam, z, radius_world[i], lim);
    out.radius_px[i] = r;
    out.active[i] = out.u[i] + r > T(0) && out.u[i] - r < T(cam.width - 1) && out.v[i] + r > T(0) &&
                    out.v[i] - r < T(cam.height - 1);
  }
}

template <class T>
struct Fragment {
  std::int32_t point = -1;
  T depth = 0;
  T dist2 = 0;
  T alpha = 0;
};

// Splat opacity at squared pixel distance dist2; zero on and beyond the rim.
template <class T>
inline T splat_alpha(T density, T dist2, T radius_px) {
  return density * std::max(T(1) - dist2 / (radius_px * radius_px), T(0));
}

// Strict (depth, point) lexicographic order.
template <class T>
inline bool fragment_less(T da, std::int32_t ia, T db, std::int32_t ib) {
  return da < db || (da == db && ia < ib);
}

// Up to K front-to-back fragments per pixel; layer k of pixel p lives at
// fragments[p*K + k] for k < count[p].
template <class T>
struct PeelBuffer {
  int width = 0, height = 0, K = 0;
  std::vector<Fragment<T>> fragments;
  std::vector<std::uint8_t> count;

  void reset(int w, int h, int k) {
    width = w;
    height = h;
    K = k;
    fragments.resize(std::size_t(w) * h * k);
    count.assign(std::size_t(w) * h, 0);
  }
  std::size_t pixel_count() const { return std::size_t(width) * height; }
  std::span<const Fragment<T>> pixel(std::size_t p) const { return {fragments.data() + p * K, count[p]}; }
  std::span<Fragment<T>> pixel(std::size_t p) { return {fragments.data() + p * K, count[p]}; }
};

template <class T>
struct LayerKey {
  T depth;
  std::int32_t point = -1;  // -1: nothing recorded yet
};

// One peeling pass: per pixel, the lexicographically smallest covering
// fragment strictly beyond prev (or the nearest one when prev is empty).
template <class T>
std::vector<Fragment<T>> rasterize_layer(const SplatSet<T>& s, int width, int height,
                                         std::span<const LayerKey<T>> prev) {
  std::vector<Fragment<T>> out(std::size_t(width) * height);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!s.active[i]) continue;
    const T r = s.radius_px[i];
    const int x0 = std::max(0, static_cast<int>(std::ceil(s.u[i] - r)));
    const int x1 = std::min(width - 1, static_cast<int>(std::floor(s.u[i] + r)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(s.v[i] - r)));
    const int y1 = std::min(height - 1, static_cast<int>(std::floor(s.v[i] + r)));
    const auto id = static_cast<std::int32_t>(i);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const T dx = T(x) - s.u[i], dy = T(y) - s.v[i];
        const T d2 = dx * dx + dy * dy;
        if (!(d2 < r * r)) continue;
        const std::size_t p = std::size_t(y) * width + x;
        if (!prev.empty() && prev[p].point >= 0 && !fragment_less(prev[p].depth, prev[p].point, s.depth[i], id))
          continue;
        auto& best = out[p];
        if (best.point >= 0 && !fragment_less(s.depth[i], id, best.depth, best.point)) continue;
        best = {id, s.depth[i], d2, splat_alpha(s.density[i], d2, r)};
      }
  }
  return out;
}

// Reusable scratch for depth_peel; keeps steady-state rendering allocation free.
template <class T>
struct PeelWorkspace {
  std::vector<std::int32_t> order;
  std::vector<std::uint32_t> tile_offsets;
  std::vector<std::uint32_t> tile_fill;
  std::vector<std::int32_t> tile_points;
};

namespace detail {

template <class T>
struct Footprint {
  int x0, x1, y0, y1;
};

template <class T>
inline Footprint<T> footprint(const SplatSet<T>& s, std::size_t i, int width, int height) {
  const T r = s.radius_px[i];
  return {std::max(0, static_cast<int>(std::ceil(s.u[i] - r))),
          std::min(width - 1, static_cast<int>(std::floor(s.u[i] + r))),
          std::max(0, static_cast<int>(std::ceil(s.v[i] - r))),
          std::min(height - 1, static_cast<int>(std::floor(s.v[i] + r)))};
}

}  // namespace detail

// K peeling passes. Equivalent to K successive rasterize_layer calls, each
// fed the previous pass's (depth, point) per pixel; evaluated in one sweep
// over depth-sorted splats binned into screen tiles.
template <class T>
void depth_peel(const SplatSet<T>& s, int width, int height, int K, PeelBuffer<T>& out, PeelWorkspace<T>& ws,
                ThreadPool& pool = ThreadPool::global()) {
  if (K < 1) throw ConfigError("depth peeling needs K >= 1");
  if (K > 255) throw ConfigError("depth peeling supports K <= 255");
  out.reset(width, height, K);
  ws.order.clear();
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s.active[i]) ws.order.push_back(static_cast<std::int32_t>(i));
  std::sort(ws.order.begin(), ws.order.end(),
            [&](std::int32_t a, std::int32_t b) { return fragment_less(s.depth[a], a, s.depth[b], b); });

  const int tiles_x = (width + kTileSize - 1) / kTileSize, tiles_y = (height + kTileSize - 1) / kTileSize;
  const std::size_t tiles = std::size_t(tiles_x) * tiles_y;
  ws.tile_offsets.assign(tiles + 1, 0);
  for (const auto i : ws.order) {
    const auto f = detail::footprint(s, std::size_t(i), width, height);
    if (f.x0 > f.x1 || f.y0 > f.y1) continue;
    for (int ty = f.y0 / kTileSize; ty <= f.y1 / kTileSize; ++ty)
      for (int tx = f.x0 / kTileSize; tx <= f.x1 / kTileSize; ++tx) ++ws.tile_offsets[ty * tiles_x + tx + 1];
  }
  for (std::size_t t = 0; t < tiles; ++t) ws.tile_offsets[t + 1] += ws.tile_offsets[t];
  ws.tile_points.resize(ws.tile_offsets[tiles]);
  ws.tile_fill.assign(ws.tile_offsets.begin(), ws.tile_offsets.end() - 1);
  for (const auto i : ws.order) {
    const auto f = detail::footprint(s, std::size_t(i), width, height);
    if (f.x0 > f.x1 || f.y0 > f.y1) continue;
    for (int ty = f.y0 / kTileSize; ty <= f.y1 / kTileSize; ++ty)
      for (int tx = f.x0 / kTileSize; tx <= f.x1 / kTileSize; ++tx)
        ws.tile_points[ws.tile_fill[ty * tiles_x + tx]++] = i;
  }

  pool.run(tiles, [&](std::size_t t) {
    const int tx = static_cast<int>(t % tiles_x), ty = static_cast<int>(t / tiles_x);
    const int bx0 = tx * kTileSize, by0 = ty * kTileSize;
    const int bx1 = std::min(width, bx0 + kTileSize) - 1, by1 = std::min(height, by0 + kTileSize) - 1;
    int open = (bx1 - bx0 + 1) * (by1 - by0 + 1);
    for (std::uint32_t k = ws.tile_offsets[t]; k < ws.tile_offsets[t + 1] && open > 0; ++k) {
      const auto i = ws.tile_points[k];
      const auto f = detail::footprint(s, std::size_t(i), width, height);
      const T r = s.radius_px[i], r2 = r * r;
      for (int y = std::max(f.y0, by0); y <= std::min(f.y1, by1); ++y)
        for (int x = std::max(f.x0, bx0); x <= std::min(f.x1, bx1); ++x) {
          const std::size_t p = std::size_t(y) * width + x;
          auto& c = out.count[p];
          if (c >= K) continue;
          const T dx = T(x) - s.u[i], dy = T(y) - s.v[i];
          const T d2 = dx * dx + dy * dy;
          if (!(d2 < r2)) continue;
          out.fragments[p * K + c] = {i, s.depth[i], d2, splat_alpha(s.density[i], d2, r)};
          if (++c == K) --open;
        }
    }
  });
}

template <class T>
PeelBuffer<T> depth_peel(const SplatSet<T>& s, int width, int height, int K) {
  PeelBuffer<T> out;
  PeelWorkspace<T> ws;
  depth_peel(s, width, height, K, out, ws);
  return out;
}

// Front-to-back compositing. `color` is clamped to [0,1]; `raw` keeps the
// unclamped sum for the reverse pass; `opacity` is the accumulated alpha.
template <class T>
struct CompositeResult {
  Image<T> color;
  Image<T> opacity;
  std::vector<T> raw;
};

// colors: per-point rgb, row i = point i.
template <class T>
void composite(const PeelBuffer<T>& buf, const PointMatrix<T>& colors, const Vec3<T>& background,
               CompositeResult<T>& out, ThreadPool& pool = ThreadPool::global()) {
  const int W = buf.width, H = buf.height;
  if (out.color.width != W || out.color.height != H || out.color.channels != 3) out.color = Image<T>(W, H, 3);
  if (out.opacity.width != W || out.opacity.height != H || out.opacity.channels != 1)
    out.opacity = Image<T>(W, H, 1);
  out.raw.resize(std::size_t(W) * H * 3);
  parallel_chunks(std::size_t(H), std::size_t(H), [&](std::size_t, std::size_t y0, std::size_t y1) {
    for (std::size_t p = y0 * W; p < y1 * W; ++p) {
      T trans = 1;
      Vec3<T> c = Vec3<T>::Zero();
      for (const auto& f : buf.pixel(p)) {
        c += (trans * f.alpha) * colors.row(f.point).transpose();
        trans *= T(1) - f.alpha;
      }
      c += trans * background;
      for (int k = 0; k < 3; ++k) {
        out.raw[p * 3 + k] = c[k];
        out.color.data[p * 3 + k] = std::clamp(c[k], T(0), T(1));
      }
      // sum_k T_k alpha_k in closed form; a running sum can overshoot 1 by an ulp.
      out.opacity.data[p] = T(1) - trans;
    }
  }, pool);
}

template <class T>
CompositeResult<T> composite(const PeelBuffer<T>& buf, const PointMatrix<T>& colors,
                             const Vec3<T>& background = Vec3<T>::Zero()) {
  CompositeResult<T> out;
  composite(buf, colors, background, out);
  return out;
}

// Accumulated opacity over the fragments flagged dynamic, with transmittance
// taken over those fragments only (the dynamic points rendered on their own).
template <class T>
Image<T> render_mask(const PeelBuffer<T>& buf, std::span<const std::uint8_t> dynamic) {
  Image<T> m(buf.width, buf.height, 1);
  for (std::size_t p = 0; p < buf.pixel_count(); ++p) {
    T trans = 1;
    for (const auto& f : buf.pixel(p)) {
      if (!dynamic.empty() && !dynamic[f.point]) continue;
      trans *= T(1) - f.alpha;
    }
    m.data[p] = T(1) - trans;
  }
  return m;
}

// Per-fragment gradients, laid out like PeelBuffer::fragments.
template <class T>
struct FragmentGrads {
  std::vector<T> dalpha;
  std::vector<Vec3<T>> dcolor;
};

// Reverse of composite. dC is the gradient w.r.t. the clamped color (zeroed
// where the raw value was clamped), dA w.r.t. the opacity; either may be
// empty. Uses the back-to-front remainder recursion, so alpha = 1 needs no
// special casing.
template <class T>
void composite_backward(const PeelBuffer<T>& buf, const PointMatrix<T>& colors, const Vec3<T>& background,
                        std::span<const T> raw, std::span<const T> dC, std::span<const T> dA,
                        FragmentGrads<T>& out, ThreadPool& pool = ThreadPool::global()) {
  const std::size_t K = std::size_t(buf.K);
  out.dalpha.assign(buf.fragments.size(), T(0));
  out.dcolor.assign(buf.fragments.size(), Vec3<T>::Zero());
  const int W = buf.width, H = buf.height;
  parallel_chunks(std::size_t(H), std::size_t(H), [&](std::size_t, std::size_t y0, std::size_t y1) {
    T trans[256];
    for (std::size_t p = y0 * W; p < y1 * W; ++p) {
      const auto frags = buf.pixel(p);
      Vec3<T> g = Vec3<T>::Zero();
      if (!dC.empty())
        for (int k = 0; k < 3; ++k) {
          const T r = raw.empty() ? T(0.5) : raw[p * 3 + k];
          g[k] = (r >= T(0) && r <= T(1)) ? dC[p * 3 + k] : T(0);
        }
      const T ga = dA.empty() ? T(0) : dA[p];
      T tr = 1;
      for (std::size_t k = 0; k < frags.size(); ++k) {
        trans[k] = tr;
        tr *= T(1) - frags[k].alpha;
      }
      T remainder = g.dot(background);
      for (std::size_t k = frags.size(); k-- > 0;) {
        const auto& f = frags[k];
        const T gk = g.dot(colors.row(f.point).transpose()) + ga;
        out.dalpha[p * K + k] = trans[k] * (gk - remainder);
        out.dcolor[p * K + k] = trans[k] * f.alpha * g;
        remainder = f.alpha * gk + (T(1) - f.alpha) * remainder;
      }
    }
  }, pool);
}

// Reverse of render_mask w.r.t. fragment alphas (dynamic fragments only).
template <class T>
void render_mask_backward(const PeelBuffer<T>& buf, std::span<const std::uint8_t> dynamic, std::span<const T> dM,
                          std::vector<T>& dalpha) {
  const std::size_t K = std::size_t(buf.K);
  dalpha.assign(buf.fragments.size(), T(0));
  std::vector<std::size_t> idx;
  std::vector<T> trans;
  for (std::size_t p = 0; p < buf.pixel_count(); ++p) {
    const auto frags = buf.pixel(p);
    idx.clear();
    trans.clear();
    T tr = 1;
    for (std::size_t k = 0; k < frags.size(); ++k) {
      if (!dynamic.empty() && !dynamic[frags[k].point]) continue;
      idx.push_back(k);
      trans.push_back(tr);
      tr *= T(1) - frags[k].alpha;
    }
    T remainder = 0;
    for (std::size_t j = idx.size(); j-- > 0;) {
      const T a = frags[idx[j]].alpha;
      dalpha[p * K + idx[j]] = trans[j] * (dM[p] - remainder);
      remainder = a * dM[p] + (T(1) - a) * remainder;
    }
  }
}

// Per-point gradients w.r.t. screen-space splat parameters.
template <class T>
struct SplatGrads {
  std::vector<T> du, dv, dradius_px, ddensity;
  PointMatrix<T> dcolor;

  void reset(std::size_t n) {
    du.assign(n, T(0));
    dv.assign(n, T(0));
    dradius_px.assign(n, T(0));
    ddensity.assign(n, T(0));
    dcolor = PointMatrix<T>::Zero(Eigen::Index(n), 3);
  }
};

// Chains per-fragment dalpha/dcolor through the splat opacity to the point
// parameters. Accumulates in fixed pixel order (deterministic).
template <class T>
void splat_backward(const PeelBuffer<T>& buf, const SplatSet<T>& s, std::span<const T> dalpha,
                    std::span<const Vec3<T>> dcolor, SplatGrads<T>& out) {
  const std::size_t K = std::size_t(buf.K);
  for (std::size_t p = 0; p < buf.pixel_count(); ++p) {
    const T px = T(p % buf.width), py = T(p / buf.width);
    const auto frags = buf.pixel(p);
    for (std::size_t k = 0; k < frags.size(); ++k) {
      const auto& f = frags[k];
      const std::size_t i = std::size_t(f.point);
      if (!dcolor.empty()) out.dcolor.row(Eigen::Index(i)) += dcolor[p * K + k].transpose();
      const T da = dalpha[p * K + k];
      if (da == T(0)) continue;
      const T r = s.radius_px[i], inv_r2 = T(1) / (r * r);
      const T sigma = s.density[i];
      out.ddensity[i] += da * (T(1) - f.dist2 * inv_r2);
      out.dradius_px[i] += da * T(2) * sigma * f.dist2 * inv_r2 / r;
      const T dd2 = -da * sigma * inv_r2;
      out.du[i] += dd2 * T(2) * (s.u[i] - px);
      out.dv[i] += dd2 * T(2) * (s.v[i] - py);
    }
  }
}

// Test oracle: every covering fragment per pixel, fully sorted, composited.
template <class T>
CompositeResult<T> oracle_full_sort_render(const SplatSet<T>& s, const PointMatrix<T>& colors, int width,
                                           int height, const Vec3<T>& background = Vec3<T>::Zero()) {
  CompositeResult<T> out;
  out.color = Image<T>(width, height, 3);
  out.opacity = Image<T>(width, height, 1);
  out.raw.assign(std::size_t(width) * height * 3, T(0));
  std::vector<Fragment<T>> frags;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      frags.clear();
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (!s.active[i]) continue;
        const T dx = T(x) - s.u[i], dy = T(y) - s.v[i];
        const T d2 = dx * dx + dy * dy;
        const T r = s.radius_px[i];
        if (d2 < r * r) frags.push_back({std::int32_t(i), s.depth[i], d2, splat_alpha(s.density[i], d2, r)});
      }
      std::sort(frags.begin(), frags.end(), [](const Fragment<T>& a, const Fragment<T>& b) {
        return fragment_less(a.depth, a.point, b.depth, b.point);
      });
      T trans = 1, acc = 0;
      Vec3<T> c = Vec3<T>::Zero();
      for (const auto& f : frags) {
        c += trans * f.alpha * colors.row(f.point).transpose();
        acc += trans * f.alpha;
        trans *= T(1) - f.alpha;
      }
      c += trans * background;
      const std::size_t p = std::size_t(y) * width + x;
      for (int k = 0; k < 3; ++k) {
        out.raw[p * 3 + k] = c[k];
        out.color.data[p * 3 + k] = std::clamp(c[k], T(0), T(1));
      }
      // sum_k T_k alpha_k in closed form; a running sum can overshoot 1 by an ulp.
      out.opacity.data[p] = T(1) - trans;
    }
  return out;
}

}  // namespace peel4d
