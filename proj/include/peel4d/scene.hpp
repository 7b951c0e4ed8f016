#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <vector>

#include "peel4d/camera.hpp"
#include "peel4d/errors.hpp"

namespace peel4d {

template <class T>
struct BBox {
  Vec3<T> min = Vec3<T>::Zero();
  Vec3<T> max = Vec3<T>::Ones();

  BBox() = default;
  BBox(const Vec3<T>& lo, const Vec3<T>& hi) : min(lo), max(hi) {
    for (int a = 0; a < 3; ++a)
      if (!(max[a] > min[a])) throw ConfigError("degenerate bounding box axis " + std::to_string(a));
  }

  Vec3<T> center() const { return T(0.5) * (min + max); }
  Vec3<T> extent() const { return max - min; }
  Vec3<T> clamp(const Vec3<T>& x) const { return x.cwiseMax(min).cwiseMin(max); }
  bool contains(const Vec3<T>& x) const {
    return (x.array() >= min.array()).all() && (x.array() <= max.array()).all();
  }

  template <class U>
  BBox<U> cast() const {
    return BBox<U>(min.template cast<U>(), max.template cast<U>());
  }
};

// Normalized (x, y, z, t) in [0,1]^4 plus the derivative of each spatial
// coordinate with respect to its world coordinate (zero where clamped).
template <class T>
struct NormalizedCoords {
  Vec4<T> q;
  Vec3<T> dq_dx;
};

template <class T>
NormalizedCoords<T> normalize_coords(const BBox<T>& box, const Vec3<T>& x, T t) {
  NormalizedCoords<T> out;
  for (int a = 0; a < 3; ++a) {
    const T scale = T(1) / (box.max[a] - box.min[a]);
    const T v = (x[a] - box.min[a]) * scale;
    out.q[a] = std::clamp(v, T(0), T(1));
    out.dq_dx[a] = (v >= T(0) && v <= T(1)) ? scale : T(0);
  }
  out.q[3] = std::clamp(t, T(0), T(1));
  return out;
}

template <class T>
using PointMatrix = Eigen::Matrix<T, Eigen::Dynamic, 3, Eigen::RowMajor>;

// Learnable point positions of one frame. `dynamic` flags points carved from
// the dynamic-region masks; the rest belong to the static background.
template <class T>
struct PointCloudFrame {
  PointMatrix<T> positions;
  std::vector<std::uint8_t> dynamic;
  int frame_index = 0;

  Eigen::Index size() const { return positions.rows(); }
  Vec3<T> point(Eigen::Index i) const { return positions.row(i).transpose(); }

  void validate() const {
    if (positions.rows() == 0) throw ConfigError("point cloud frame is empty");
    if (!positions.allFinite()) throw ConfigError("point cloud frame has non-finite positions");
    if (dynamic.size() != static_cast<std::size_t>(positions.rows()))
      throw ConfigError("dynamic flag count does not match point count");
  }

  template <class U>
  PointCloudFrame<U> cast() const {
    PointCloudFrame<U> f;
    f.positions = positions.template cast<U>();
    f.dynamic = dynamic;
    f.frame_index = frame_index;
    return f;
  }
};

template <class T>
struct SceneSequence {
  std::vector<PointCloudFrame<T>> frames;
  BBox<T> bbox;

  int num_frames() const { return static_cast<int>(frames.size()); }

  T time_of(int frame_index) const { return normalized_time(frame_index, num_frames()); }

  static T normalized_time(int frame_index, int num_frames) {
    if (num_frames <= 1) return T(0);
    return T(frame_index) / T(num_frames - 1);
  }

  void clamp_to_bbox() {
    for (auto& f : frames)
      for (Eigen::Index i = 0; i < f.positions.rows(); ++i)
        f.positions.row(i) = bbox.clamp(f.positions.row(i).transpose()).transpose();
  }
};

// Nearest frame index for a normalized time.
inline int frame_for_time(double t, int num_frames) {
  if (num_frames <= 1) return 0;
  const double c = std::clamp(t, 0.0, 1.0);
  return static_cast<int>(std::lround(c * (num_frames - 1)));
}

}  // namespace peel4d
