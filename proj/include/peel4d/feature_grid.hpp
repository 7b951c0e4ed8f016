#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "peel4d/camera.hpp"
#include "peel4d/errors.hpp"

namespace peel4d {

// One 2D grid of d-channel feature vectors, row-major (rows, cols, channels).
// The first coordinate of the plane's pair indexes rows, the second columns.
template <class T>
struct FeaturePlane {
  int rows = 0, cols = 0, channels = 0;
  std::vector<T> data;

  FeaturePlane() = default;
  FeaturePlane(int r, int c, int d) : rows(r), cols(c), channels(d), data(std::size_t(r) * c * d, T(0)) {
    if (r < 2 || c < 2 || d < 1) throw ConfigError("feature plane needs at least 2x2 nodes and 1 channel");
  }

  T* node(int i, int j) { return data.data() + (std::size_t(i) * cols + j) * channels; }
  const T* node(int i, int j) const { return data.data() + (std::size_t(i) * cols + j) * channels; }
};

struct FeatureGridConfig {
  int spatial_res = 64;
  int time_res = 2;  // max(T, 2)
  int channels = 8;
};

// Axis pairs (0=x, 1=y, 2=z, 3=t) sampled by each plane, in concatenation order
// xy, xz, yz, tx, ty, tz.
inline constexpr std::array<std::array<int, 2>, 6> kPlaneAxes{{{0, 1}, {0, 2}, {1, 2}, {3, 0}, {3, 1}, {3, 2}}};

// Six-plane factorization of a 4D feature field; features are concatenated.
template <class T>
struct FeaturePlaneSet {
  std::array<FeaturePlane<T>, 6> planes;

  FeaturePlaneSet() = default;
  explicit FeaturePlaneSet(const FeatureGridConfig& cfg) {
    const int tr = std::max(cfg.time_res, 2);
    for (int p = 0; p < 6; ++p) {
      const int rows = kPlaneAxes[p][0] == 3 ? tr : cfg.spatial_res;
      planes[p] = FeaturePlane<T>(rows, cfg.spatial_res, cfg.channels);
    }
  }

  int channels() const { return planes[0].channels; }
  int feature_dim() const { return 6 * channels(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : planes) n += p.data.size();
    return n;
  }

  void set_zero() {
    for (auto& p : planes) std::fill(p.data.begin(), p.data.end(), T(0));
  }

  template <class Rng>
  void init_uniform(Rng& rng, T scale = T(1e-2)) {
    std::uniform_real_distribution<double> dist(-double(scale), double(scale));
    for (auto& p : planes)
      for (auto& v : p.data) v = T(dist(rng));
  }

  template <class U>
  FeaturePlaneSet<U> cast() const {
    FeaturePlaneSet<U> out;
    for (int p = 0; p < 6; ++p) {
      out.planes[p].rows = planes[p].rows;
      out.planes[p].cols = planes[p].cols;
      out.planes[p].channels = planes[p].channels;
      out.planes[p].data.assign(planes[p].data.begin(), planes[p].data.end());
    }
    return out;
  }
};

namespace detail {

// Cell lookup along one axis. Positions on an interior node resolve to the
// lower-index cell, so the node sits at fraction 1.
template <class T>
struct CellCoord {
  int i0;
  T frac;
};

template <class T>
inline CellCoord<T> locate(T c, int res) {
  const T pos = std::clamp(c, T(0), T(1)) * T(res - 1);
  int i0 = static_cast<int>(std::ceil(pos)) - 1;
  i0 = std::clamp(i0, 0, res - 2);
  return {i0, pos - T(i0)};
}

}  // namespace detail

// Bilinear sample of every plane at q = (x, y, z, t) in [0,1]^4 (clamped);
// writes 6*d features into `out`.
template <class T>
void sample(const FeaturePlaneSet<T>& set, const Vec4<T>& q, std::span<T> out) {
  const int d = set.channels();
  for (int p = 0; p < 6; ++p) {
    const auto& pl = set.planes[p];
    const auto a = detail::locate(q[kPlaneAxes[p][0]], pl.rows);
    const auto b = detail::locate(q[kPlaneAxes[p][1]], pl.cols);
    const T w00 = (1 - a.frac) * (1 - b.frac), w01 = (1 - a.frac) * b.frac;
    const T w10 = a.frac * (1 - b.frac), w11 = a.frac * b.frac;
    const T* n00 = pl.node(a.i0, b.i0);
    const T* n01 = n00 + d;
    const T* n10 = pl.node(a.i0 + 1, b.i0);
    const T* n11 = n10 + d;
    T* o = out.data() + p * d;
    for (int c = 0; c < d; ++c) o[c] = w00 * n00[c] + w01 * n01[c] + w10 * n10[c] + w11 * n11[c];
  }
}

template <class T>
Eigen::Matrix<T, Eigen::Dynamic, 1> sample(const FeaturePlaneSet<T>& set, const Vec4<T>& q) {
  Eigen::Matrix<T, Eigen::Dynamic, 1> f(set.feature_dim());
  sample(set, q, std::span<T>(f.data(), f.size()));
  return f;
}

// Reverse of `sample`: accumulates df into the (at most four) corner nodes of
// each plane in `grad` and returns d(df . f)/dq. Out-of-range coordinates were
// clamped on the way in, so their dq entry is the derivative along the clamped
// edge; callers chain through normalize_coords, which zeroes it.
template <class T>
Vec4<T> sample_backward(const FeaturePlaneSet<T>& set, const Vec4<T>& q, std::span<const T> df,
                        FeaturePlaneSet<T>& grad) {
  const int d = set.channels();
  Vec4<T> dq = Vec4<T>::Zero();
  for (int p = 0; p < 6; ++p) {
    const auto& pl = set.planes[p];
    auto& gp = grad.planes[p];
    const int ax = kPlaneAxes[p][0], bx = kPlaneAxes[p][1];
    const auto a = detail::locate(q[ax], pl.rows);
    const auto b = detail::locate(q[bx], pl.cols);
    const T w00 = (1 - a.frac) * (1 - b.frac), w01 = (1 - a.frac) * b.frac;
    const T w10 = a.frac * (1 - b.frac), w11 = a.frac * b.frac;
    const T* n00 = pl.node(a.i0, b.i0);
    const T* n01 = n00 + d;
    const T* n10 = pl.node(a.i0 + 1, b.i0);
    const T* n11 = n10 + d;
    T* g00 = gp.node(a.i0, b.i0);
    T* g01 = g00 + d;
    T* g10 = gp.node(a.i0 + 1, b.i0);
    T* g11 = g10 + d;
    const T* g = df.data() + p * d;
    T da = 0, db = 0;
    for (int c = 0; c < d; ++c) {
      g00[c] += w00 * g[c];
      g01[c] += w01 * g[c];
      g10[c] += w10 * g[c];
      g11[c] += w11 * g[c];
      da += g[c] * ((1 - b.frac) * (n10[c] - n00[c]) + b.frac * (n11[c] - n01[c]));
      db += g[c] * ((1 - a.frac) * (n01[c] - n00[c]) + a.frac * (n11[c] - n10[c]));
    }
    dq[ax] += da * T(pl.rows - 1);
    dq[bx] += db * T(pl.cols - 1);
  }
  return dq;
}

}  // namespace peel4d
