#pragma once

// Training-path renderer: feature sampling, prediction heads, hybrid
// appearance, depth peeling and compositing, with the full reverse pass back
// to point positions, feature planes and head weights.

#include <Eigen/Core>
#include <array>
#include <span>
#include <vector>

#include "peel4d/appearance.hpp"
#include "peel4d/feature_grid.hpp"
#include "peel4d/heads.hpp"
#include "peel4d/model.hpp"
#include "peel4d/parallel.hpp"
#include "peel4d/renderer.hpp"
#include "peel4d/sh.hpp"

namespace peel4d {

// Fixed work partition; gradient buffers are merged in chunk order so results
// do not depend on the number of threads.
inline constexpr std::size_t kWorkChunks = 8;

// Source views available at one frame: all cameras with that frame's images.
template <class T>
struct FrameViews {
  std::span<const Camera<T>> cameras;
  std::span<const Image<float>* const> images;
};

template <class T>
struct RenderTarget {
  Camera<T> camera;
  int exclude_view = -1;  // source view withheld from blending (the view being fitted)
  int K = 15;
  bool with_mask = false;
};

template <class T>
struct ModelGrads {
  FeaturePlaneSet<T> planes;
  HeadSet<T> heads;
  PointMatrix<T> positions;

  void reset_like(const Model<T>& m, int frame) {
    if (planes.planes[0].data.size() != m.planes.planes[0].data.size()) planes = m.planes;
    planes.set_zero();
    heads = m.heads.zeros_like();
    positions = PointMatrix<T>::Zero(m.scene.frames[frame].size(), 3);
  }
};

// Per (used point, selected view) appearance inputs kept for the reverse pass.
template <class T>
struct ViewTap {
  Vec2<T> uv = Vec2<T>::Zero();
  ImageSample<T> sample;
  int column = -1;  // blend-head batch column, -1 when invisible
};

template <class T>
struct ColorChunk {
  std::vector<std::int32_t> points;  // used points in this chunk
  Matrix<T> sh_out;
  MlpTape<T> sh_tape;
  Matrix<T> blend_out;
  MlpTape<T> blend_tape;
  std::vector<ViewTap<T>> taps;           // points.size() x selected
  std::vector<ViewSample<T>> samples;     // points.size() x selected
  std::vector<T> weights;                 // points.size() x selected
  std::vector<std::pair<int, int>> pairs;  // blend column -> (local point, view slot)
};

template <class T>
struct GeoChunk {
  MlpTape<T> tape;
  Matrix<T> out;
};

template <class T>
struct ForwardState {
  int frame = 0;
  T time = 0;
  std::vector<std::int32_t> candidates;
  std::vector<std::int32_t> slot;  // point -> candidate column, -1 if culled
  std::vector<Vec4<T>> q;
  std::vector<Vec3<T>> dq_dx;
  Matrix<T> features;  // feature_dim x candidates
  std::array<GeoChunk<T>, kWorkChunks> geo;
  std::vector<T> radius_world, density;
  SplatSet<T> splats, mask_splats;
  PeelBuffer<T> buffer, mask_buffer;
  PeelWorkspace<T> peel_ws;
  std::vector<int> selected;
  std::vector<std::int32_t> used;
  std::array<ColorChunk<T>, kWorkChunks> color;
  std::vector<Vec3<T>> sh_dir;  // per point, unit direction from the target camera
  std::vector<T> sh_dist;
  PointMatrix<T> colors;
  CompositeResult<T> image;
  Image<T> mask;
};

namespace detail {

// Points whose splat could touch the image: in the clip range and within the
// largest splat radius of the image rectangle.
template <class T>
void cull_candidates(const Model<T>& m, const PointCloudFrame<T>& frame, const Camera<T>& cam,
                     ForwardState<T>& st) {
  const auto n = std::size_t(frame.size());
  st.candidates.clear();
  st.slot.assign(n, -1);
  const T margin = T(m.config.r_px_max);
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = project(cam, frame.point(Eigen::Index(i)), margin);
    if (!p.visible) continue;
    st.slot[i] = static_cast<std::int32_t>(st.candidates.size());
    st.candidates.push_back(static_cast<std::int32_t>(i));
  }
}

}  // namespace detail

// Forward render of `frame` seen from `target`. Fills st.image (and st.mask
// when target.with_mask).
template <class T>
void render_forward(const Model<T>& m, int frame_index, const RenderTarget<T>& target, const FrameViews<T>& views,
                    ForwardState<T>& st, ThreadPool& pool = ThreadPool::global()) {
  const auto& frame = m.scene.frames.at(std::size_t(frame_index));
  const auto& cam = target.camera;
  const std::size_t n = std::size_t(frame.size());
  const int fd = m.planes.feature_dim();
  st.frame = frame_index;
  st.time = m.scene.time_of(frame_index);
  detail::cull_candidates(m, frame, cam, st);
  const std::size_t nc = st.candidates.size();

  // Point features and geometry for every candidate.
  st.q.resize(n);
  st.dq_dx.resize(n);
  st.features.resize(fd, Eigen::Index(nc));
  st.radius_world.assign(n, T(0));
  st.density.assign(n, T(0));
  parallel_chunks(nc, kWorkChunks, [&](std::size_t c, std::size_t b, std::size_t e) {
    for (std::size_t j = b; j < e; ++j) {
      const auto i = std::size_t(st.candidates[j]);
      const auto nq = normalize_coords(m.scene.bbox, frame.point(Eigen::Index(i)), st.time);
      st.q[i] = nq.q;
      st.dq_dx[i] = nq.dq_dx;
      sample(m.planes, nq.q, std::span<T>(st.features.col(Eigen::Index(j)).data(), std::size_t(fd)));
    }
    auto& g = st.geo[c];
    g.out = mlp_forward_batch(m.heads.geometry, Matrix<T>(st.features.middleCols(Eigen::Index(b), Eigen::Index(e - b))),
                              &g.tape);
    for (std::size_t j = b; j < e; ++j) {
      const auto i = std::size_t(st.candidates[j]);
      const auto geo = geometry_from_outputs(m.heads, g.out(0, Eigen::Index(j - b)), g.out(1, Eigen::Index(j - b)));
      st.radius_world[i] = geo.radius;
      st.density[i] = geo.density;
    }
  }, pool);
  for (std::size_t c = 0; c < kWorkChunks; ++c)
    if (nc < kWorkChunks && c >= nc) st.geo[c] = {};

  project_splats(cam, frame.positions, std::span<const T>(st.radius_world), std::span<const T>(st.density), st.splats,
                 m.radius_limits());
  for (std::size_t i = 0; i < n; ++i)
    if (st.slot[i] < 0) st.splats.active[i] = 0;
  depth_peel(st.splats, cam.width, cam.height, target.K, st.buffer, st.peel_ws, pool);

  // Appearance only for points that landed in the peel buffer.
  std::vector<std::uint8_t> in_buffer(n, 0);
  for (std::size_t p = 0; p < st.buffer.pixel_count(); ++p)
    for (const auto& f : st.buffer.pixel(p)) in_buffer[std::size_t(f.point)] = 1;
  st.used.clear();
  for (std::size_t i = 0; i < n; ++i)
    if (in_buffer[i]) st.used.push_back(static_cast<std::int32_t>(i));

  st.selected = select_source_views(cam, views.cameras, m.config.source_views, m.scene.bbox.center(),
                                    target.exclude_view);
  const std::size_t ns = st.selected.size();
  const int id = m.heads.image_dim();
  const int sh_degree = m.heads.config.sh_degree;
  st.colors = PointMatrix<T>::Zero(Eigen::Index(n), 3);
  st.sh_dir.resize(n);
  st.sh_dist.resize(n);
  const Vec3<T> eye = cam.center();
  for (auto& cc : st.color) cc.points.clear();
  parallel_chunks(st.used.size(), kWorkChunks, [&](std::size_t c, std::size_t b, std::size_t e) {
    auto& cc = st.color[c];
    cc.points.assign(st.used.begin() + std::ptrdiff_t(b), st.used.begin() + std::ptrdiff_t(e));
    const std::size_t nu = cc.points.size();
    Matrix<T> X(fd, Eigen::Index(nu));
    for (std::size_t k = 0; k < nu; ++k) X.col(Eigen::Index(k)) = st.features.col(st.slot[std::size_t(cc.points[k])]);
    cc.sh_out = mlp_forward_batch(m.heads.sh, X, &cc.sh_tape);

    cc.taps.assign(nu * ns, ViewTap<T>{});
    cc.samples.assign(nu * ns, ViewSample<T>{});
    cc.weights.assign(nu * ns, T(0));
    cc.pairs.clear();
    std::vector<Vector<T>> cols;
    for (std::size_t k = 0; k < nu; ++k) {
      const Vec3<T> x = frame.point(cc.points[k]);
      for (std::size_t s = 0; s < ns; ++s) {
        const int v = st.selected[s];
        const auto proj = project(views.cameras[std::size_t(v)], x);
        if (!proj.visible) continue;
        auto& tap = cc.taps[k * ns + s];
        tap.uv = proj.uv;
        tap.sample = image_feature(m.heads, *views.images[std::size_t(v)], proj.uv.x(), proj.uv.y(), true);
        tap.column = static_cast<int>(cc.pairs.size());
        cc.pairs.emplace_back(int(k), int(s));
        cc.samples[k * ns + s].visible = true;
        cc.samples[k * ns + s].color = tap.sample.color;
      }
    }
    Matrix<T> XB(fd + id, Eigen::Index(cc.pairs.size()));
    for (std::size_t col = 0; col < cc.pairs.size(); ++col) {
      const auto [k, s] = cc.pairs[col];
      XB.col(Eigen::Index(col)).head(fd) = X.col(k);
      for (int c2 = 0; c2 < id; ++c2) XB(fd + c2, Eigen::Index(col)) = cc.taps[std::size_t(k) * ns + std::size_t(s)].sample.feature[std::size_t(c2)];
    }
    cc.blend_out = mlp_forward_batch(m.heads.blend, XB, &cc.blend_tape);
    for (std::size_t col = 0; col < cc.pairs.size(); ++col) {
      const auto [k, s] = cc.pairs[col];
      cc.samples[std::size_t(k) * ns + std::size_t(s)].logit = cc.blend_out(0, Eigen::Index(col));
    }
    for (std::size_t k = 0; k < nu; ++k) {
      const auto i = std::size_t(cc.points[k]);
      const auto blend = ibr_blend<T>(std::span<const ViewSample<T>>(cc.samples.data() + k * ns, ns),
                                      std::span<T>(cc.weights.data() + k * ns, ns));
      const Vec3<T> rel = frame.point(Eigen::Index(i)) - eye;
      st.sh_dist[i] = rel.norm();
      st.sh_dir[i] = rel / st.sh_dist[i];
      const Vec3<T> c_sh = eval_sh<T>(sh_degree, std::span<const T>(cc.sh_out.col(Eigen::Index(k)).data(), std::size_t(cc.sh_out.rows())),
                                      st.sh_dir[i]);
      st.colors.row(Eigen::Index(i)) = point_color(blend.color, c_sh).transpose();
    }
  }, pool);

  composite(st.buffer, st.colors, m.background(), st.image, pool);

  if (target.with_mask) {
    st.mask_splats = st.splats;
    for (std::size_t i = 0; i < n; ++i)
      if (!frame.dynamic[i]) st.mask_splats.active[i] = 0;
    depth_peel(st.mask_splats, cam.width, cam.height, target.K, st.mask_buffer, st.peel_ws, pool);
    st.mask = render_mask(st.mask_buffer, std::span<const std::uint8_t>());
  }
}

// Reverse pass of render_forward. dC: gradient w.r.t. the clamped image
// (W*H*3), dM: gradient w.r.t. the dynamic mask (W*H) or empty.
template <class T>
void render_backward(const Model<T>& m, const RenderTarget<T>& target, const FrameViews<T>& views,
                     const ForwardState<T>& st, std::span<const T> dC, std::span<const T> dM, ModelGrads<T>& grads,
                     ThreadPool& pool = ThreadPool::global()) {
  const auto& frame = m.scene.frames.at(std::size_t(st.frame));
  const auto& cam = target.camera;
  const std::size_t n = std::size_t(frame.size());
  const int fd = m.planes.feature_dim();
  const std::size_t ns = st.selected.size();
  grads.reset_like(m, st.frame);

  FragmentGrads<T> fg;
  composite_backward(st.buffer, st.colors, m.background(), std::span<const T>(st.image.raw), dC, std::span<const T>(),
                     fg, pool);
  SplatGrads<T> sg;
  sg.reset(n);
  splat_backward(st.buffer, st.splats, std::span<const T>(fg.dalpha), std::span<const Vec3<T>>(fg.dcolor), sg);
  if (target.with_mask && !dM.empty()) {
    std::vector<T> dalpha_mask;
    render_mask_backward(st.mask_buffer, std::span<const std::uint8_t>(), dM, dalpha_mask);
    splat_backward(st.mask_buffer, st.mask_splats, std::span<const T>(dalpha_mask), std::span<const Vec3<T>>(), sg);
  }

  // d(feature) per candidate column, filled by the appearance and geometry
  // reverse passes below.
  Matrix<T> dF = Matrix<T>::Zero(fd, Eigen::Index(st.candidates.size()));
  std::array<HeadSet<T>, kWorkChunks> head_grads;
  for (auto& h : head_grads) h = m.heads.zeros_like();

  // Appearance.
  const int sh_degree = m.heads.config.sh_degree;
  pool.run(kWorkChunks, [&](std::size_t c) {
    const auto& cc = st.color[c];
    const std::size_t nu = cc.points.size();
    if (nu == 0) return;
    auto& hg = head_grads[c];
    Matrix<T> dsh = Matrix<T>::Zero(cc.sh_out.rows(), Eigen::Index(nu));
    Matrix<T> dblend = Matrix<T>::Zero(1, Eigen::Index(cc.pairs.size()));
    std::vector<Vec2<T>> duv(nu * ns, Vec2<T>::Zero());
    std::vector<T> dlogit(ns);
    std::vector<Vec3<T>> dcol(ns);
    for (std::size_t k = 0; k < nu; ++k) {
      const auto i = std::size_t(cc.points[k]);
      const Vec3<T> dcolor = sg.dcolor.row(Eigen::Index(i)).transpose();
      const Vec3<T> dd = eval_sh_backward<T>(
          sh_degree, std::span<const T>(cc.sh_out.col(Eigen::Index(k)).data(), std::size_t(cc.sh_out.rows())),
          st.sh_dir[i], dcolor, std::span<T>(dsh.col(Eigen::Index(k)).data(), std::size_t(dsh.rows())));
      const Vec3<T>& d = st.sh_dir[i];
      grads.positions.row(Eigen::Index(i)) += ((dd - d * d.dot(dd)) / st.sh_dist[i]).transpose();
      ibr_blend_backward<T>(std::span<const ViewSample<T>>(cc.samples.data() + k * ns, ns),
                            std::span<const T>(cc.weights.data() + k * ns, ns), dcolor, std::span<T>(dlogit),
                            std::span<Vec3<T>>(dcol));
      for (std::size_t s = 0; s < ns; ++s) {
        const auto& tap = cc.taps[k * ns + s];
        if (tap.column < 0) continue;
        dblend(0, tap.column) = dlogit[s];
        duv[k * ns + s] += Vec2<T>(dcol[s].dot(tap.sample.dcolor_du), dcol[s].dot(tap.sample.dcolor_dv));
      }
    }
    const Matrix<T> dX_sh = mlp_backward_batch(m.heads.sh, cc.sh_tape, dsh, hg.sh);
    const Matrix<T> dX_blend = mlp_backward_batch(m.heads.blend, cc.blend_tape, dblend, hg.blend);
    for (std::size_t k = 0; k < nu; ++k) dF.col(st.slot[std::size_t(cc.points[k])]) += dX_sh.col(Eigen::Index(k));
    const int id = m.heads.image_dim();
    std::array<T, kConvChannels> dfeat{};
    for (std::size_t col = 0; col < cc.pairs.size(); ++col) {
      const auto [k, s] = cc.pairs[col];
      const auto i = std::size_t(cc.points[std::size_t(k)]);
      dF.col(st.slot[i]) += dX_blend.col(Eigen::Index(col)).head(fd);
      const auto& tap = cc.taps[std::size_t(k) * ns + std::size_t(s)];
      Vec2<T>& g = duv[std::size_t(k) * ns + std::size_t(s)];
      for (int c2 = 0; c2 < id; ++c2) {
        dfeat[std::size_t(c2)] = dX_blend(fd + c2, Eigen::Index(col));
        g.x() += dfeat[std::size_t(c2)] * tap.sample.dfeature_du[std::size_t(c2)];
        g.y() += dfeat[std::size_t(c2)] * tap.sample.dfeature_dv[std::size_t(c2)];
      }
      if (m.heads.has_conv())
        image_feature_backward(m.heads, *views.images[std::size_t(st.selected[std::size_t(s)])], tap.uv.x(),
                               tap.uv.y(), std::span<const T>(dfeat.data(), std::size_t(id)), hg.conv);
    }
    for (std::size_t k = 0; k < nu; ++k) {
      const auto i = std::size_t(cc.points[k]);
      const Vec3<T> x = frame.point(Eigen::Index(i));
      for (std::size_t s = 0; s < ns; ++s) {
        if (cc.taps[k * ns + s].column < 0) continue;
        const auto J = project_jacobian(views.cameras[std::size_t(st.selected[s])], x);
        grads.positions.row(Eigen::Index(i)) += (J.template topRows<2>().transpose() * duv[k * ns + s]).transpose();
      }
    }
  });

  // Geometry and projection into the target view.
  const auto lim = m.radius_limits();
  std::array<FeaturePlaneSet<T>, kWorkChunks> plane_grads;
  parallel_chunks(st.candidates.size(), kWorkChunks, [&](std::size_t c, std::size_t b, std::size_t e) {
    auto& hg = head_grads[c];
    Matrix<T> dgeo = Matrix<T>::Zero(2, Eigen::Index(e - b));
    for (std::size_t j = b; j < e; ++j) {
      const auto i = std::size_t(st.candidates[j]);
      if (!st.splats.active[i]) continue;
      const Vec3<T> x = frame.point(Eigen::Index(i));
      const T z = st.splats.depth[i];
      const T r_raw = st.radius_world[i] * cam.fy / z;
      T dz = 0;
      if (r_raw > lim.min_px && r_raw < lim.max_px) {
        dgeo(0, Eigen::Index(j - b)) = sg.dradius_px[i] * cam.fy / z;
        dz = -sg.dradius_px[i] * r_raw / z;
      }
      dgeo(1, Eigen::Index(j - b)) = sg.ddensity[i];
      const auto J = project_jacobian(cam, x);
      grads.positions.row(Eigen::Index(i)) += (J.transpose() * Vec3<T>(sg.du[i], sg.dv[i], dz)).transpose();
    }
    const Matrix<T> dX = mlp_backward_batch(m.heads.geometry, st.geo[c].tape, dgeo, hg.geometry);
    dF.middleCols(Eigen::Index(b), Eigen::Index(e - b)) += dX;
    auto& pg = plane_grads[c];
    pg = m.planes;
    pg.set_zero();
    for (std::size_t j = b; j < e; ++j) {
      const auto i = std::size_t(st.candidates[j]);
      const Vec4<T> dq = sample_backward(m.planes, st.q[i],
                                         std::span<const T>(dF.col(Eigen::Index(j)).data(), std::size_t(fd)), pg);
      grads.positions.row(Eigen::Index(i)) += dq.template head<3>().cwiseProduct(st.dq_dx[i]).transpose();
    }
  }, pool);

  for (std::size_t c = 0; c < kWorkChunks; ++c) {
    grads.heads += head_grads[c];
    if (plane_grads[c].planes[0].data.empty()) continue;
    for (int p = 0; p < 6; ++p) {
      auto& dst = grads.planes.planes[p].data;
      const auto& src = plane_grads[c].planes[p].data;
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
}

}  // namespace peel4d
