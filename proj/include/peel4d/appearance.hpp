#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "peel4d/camera.hpp"
#include "peel4d/heads.hpp"
#include "peel4d/image.hpp"

namespace peel4d {

// A captured view at one frame: its camera and RGB image in [0,1].
template <class T>
struct SourceView {
  Camera<T> camera;
  const Image<float>* image = nullptr;
};

// Logit assigned to views that cannot see a point.
template <class T>
constexpr T invisible_logit() {
  return std::numeric_limits<T>::lowest();
}

// Ranks sources by the angle between (anchor -> source center) and
// (anchor -> target center); returns the first min(n, #sources) indices,
// ties broken by index. `exclude` removes one source (e.g. the view being
// fitted) from consideration.
template <class T>
std::vector<int> select_source_views(const Camera<T>& target, std::span<const Camera<T>> sources, int n,
                                     const Vec3<T>& anchor, int exclude = -1) {
  if (n < 1) throw ConfigError("number of source views must be at least 1");
  const Vec3<T> dt = (target.center() - anchor).normalized();
  std::vector<std::pair<T, int>> ranked;
  ranked.reserve(sources.size());
  for (int i = 0; i < static_cast<int>(sources.size()); ++i) {
    if (i == exclude) continue;
    const Vec3<T> ds = (sources[i].center() - anchor).normalized();
    const T c = std::clamp(dt.dot(ds), T(-1), T(1));
    ranked.emplace_back(std::acos(c), i);
  }
  std::sort(ranked.begin(), ranked.end());
  std::vector<int> out;
  for (int i = 0; i < std::min<int>(n, static_cast<int>(ranked.size())); ++i) out.push_back(ranked[i].second);
  return out;
}

template <class T>
struct ViewSample {
  bool visible = false;
  Vec3<T> color = Vec3<T>::Zero();
  T logit = invisible_logit<T>();
};

template <class T>
struct IbrBlend {
  Vec3<T> color = Vec3<T>::Zero();
  bool sh_only = true;
};

// Softmax over visible logits; weights written to `w` (zeros for invisible).
template <class T>
IbrBlend<T> ibr_blend(std::span<const ViewSample<T>> views, std::span<T> w) {
  IbrBlend<T> out;
  T m = invisible_logit<T>();
  for (const auto& v : views)
    if (v.visible) m = std::max(m, v.logit);
  T z = 0;
  for (std::size_t i = 0; i < views.size(); ++i) {
    w[i] = views[i].visible ? std::exp(views[i].logit - m) : T(0);
    z += w[i];
  }
  if (z == T(0)) return out;
  out.sh_only = false;
  for (std::size_t i = 0; i < views.size(); ++i) {
    w[i] /= z;
    out.color += w[i] * views[i].color;
  }
  return out;
}

// Reverse of ibr_blend: per-view dlogit and dcolor from dc.
template <class T>
void ibr_blend_backward(std::span<const ViewSample<T>> views, std::span<const T> w, const Vec3<T>& dc,
                        std::span<T> dlogit, std::span<Vec3<T>> dcolor) {
  T mean = 0;
  for (std::size_t i = 0; i < views.size(); ++i)
    if (views[i].visible) mean += w[i] * dc.dot(views[i].color);
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (!views[i].visible) {
      dlogit[i] = 0;
      dcolor[i].setZero();
      continue;
    }
    dlogit[i] = w[i] * (dc.dot(views[i].color) - mean);
    dcolor[i] = w[i] * dc;
  }
}

// Image-blended color of one point seen through the selected source views.
template <class T>
IbrBlend<T> ibr_color(const HeadSet<T>& heads, const Vec3<T>& point, const Vector<T>& feature,
                      std::span<const SourceView<T>> selected, std::vector<ViewSample<T>>* samples = nullptr) {
  std::vector<ViewSample<T>> local(selected.size());
  std::vector<T> w(selected.size());
  for (std::size_t i = 0; i < selected.size(); ++i) {
    const auto& sv = selected[i];
    const auto proj = project(sv.camera, point);
    if (!proj.visible) continue;
    const auto s = image_feature(heads, *sv.image, proj.uv.x(), proj.uv.y());
    Vector<T> f_img(heads.image_dim());
    for (int c = 0; c < heads.image_dim(); ++c) f_img[c] = s.feature[c];
    local[i].visible = true;
    local[i].color = s.color;
    local[i].logit = blend_head_eval(heads, feature, f_img);
  }
  const auto out = ibr_blend<T>(local, w);
  if (samples) *samples = std::move(local);
  return out;
}

template <class T>
Vec3<T> point_color(const Vec3<T>& c_ibr, const Vec3<T>& c_sh) {
  return c_ibr + c_sh;
}

}  // namespace peel4d
