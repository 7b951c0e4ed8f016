#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "peel4d/camera.hpp"
#include "peel4d/errors.hpp"
#include "peel4d/image.hpp"
#include "peel4d/scene.hpp"

namespace peel4d {

// Dense occupancy over a res^3 grid spanning a bounding box; voxel (i,j,k)
// has its center at min + (idx + 0.5) * extent / res.
template <class T>
struct VoxelGrid {
  int res = 0;
  BBox<T> box;
  std::vector<std::uint8_t> occupied;

  std::size_t index(int i, int j, int k) const { return (std::size_t(k) * res + j) * res + i; }
  Vec3<T> center(int i, int j, int k) const {
    const Vec3<T> e = box.extent() / T(res);
    return box.min + Vec3<T>((T(i) + T(0.5)) * e.x(), (T(j) + T(0.5)) * e.y(), (T(k) + T(0.5)) * e.z());
  }
  bool at(int i, int j, int k) const {
    if (i < 0 || j < 0 || k < 0 || i >= res || j >= res || k >= res) return false;
    return occupied[index(i, j, k)] != 0;
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto o : occupied) n += o;
    return n;
  }
};

// True when the voxel center falls inside the view frustum and its nearest
// pixel is foreground; `in_frustum` reports whether the view had a say.
template <class T>
bool mask_accepts(const Camera<T>& cam, const Image<float>& mask, const Vec3<T>& x, bool& in_frustum) {
  const auto p = project(cam, x);
  const long px = std::lround(double(p.uv.x())), py = std::lround(double(p.uv.y()));
  in_frustum = p.depth >= cam.near && p.depth <= cam.far && px >= 0 && py >= 0 && px < mask.width &&
               py < mask.height;
  if (!in_frustum) return true;
  return mask(int(px), int(py), 0) >= 0.5f;
}

// Visual hull: a voxel survives iff every view that sees its center sees it
// inside the mask.
template <class T>
VoxelGrid<T> carve_hull(std::span<const Image<float>> masks, std::span<const Camera<T>> cameras,
                        const BBox<T>& box, int res) {
  if (masks.size() != cameras.size()) throw ConfigError("space_carve: one mask per camera required");
  if (masks.size() < 2) throw ConfigError("space_carve: at least two views required");
  if (res < 8) throw ConfigError("space_carve: resolution must be at least 8");
  for (std::size_t v = 0; v < masks.size(); ++v)
    if (masks[v].width != cameras[v].width || masks[v].height != cameras[v].height)
      throw ConfigError("space_carve: mask " + std::to_string(v) + " does not match its camera");
  VoxelGrid<T> g;
  g.res = res;
  g.box = box;
  g.occupied.assign(std::size_t(res) * res * res, 1);
  std::size_t alive = g.occupied.size();
  for (std::size_t v = 0; v < masks.size(); ++v) {
    for (int k = 0; k < res; ++k)
      for (int j = 0; j < res; ++j)
        for (int i = 0; i < res; ++i) {
          auto& o = g.occupied[g.index(i, j, k)];
          if (!o) continue;
          bool seen = false;
          if (!mask_accepts(cameras[v], masks[v], g.center(i, j, k), seen)) {
            o = 0;
            --alive;
          }
        }
    if (alive == 0)
      throw InitializationError("space carving removed every voxel; view " + std::to_string(v) +
                                " carved the last survivors away");
  }
  return g;
}

// Occupied voxels with at least one empty 6-neighbor (the grid border counts
// as empty).
template <class T>
std::vector<Vec3<T>> surface_voxels(const VoxelGrid<T>& g) {
  std::vector<Vec3<T>> out;
  for (int k = 0; k < g.res; ++k)
    for (int j = 0; j < g.res; ++j)
      for (int i = 0; i < g.res; ++i) {
        if (!g.at(i, j, k)) continue;
        if (g.at(i - 1, j, k) && g.at(i + 1, j, k) && g.at(i, j - 1, k) && g.at(i, j + 1, k) &&
            g.at(i, j, k - 1) && g.at(i, j, k + 1))
          continue;
        out.push_back(g.center(i, j, k));
      }
  return out;
}

template <class T>
PointCloudFrame<T> space_carve(std::span<const Image<float>> masks, std::span<const Camera<T>> cameras,
                               const BBox<T>& box, int res = 64, bool dynamic = true) {
  const auto hull = carve_hull(masks, cameras, box, res);
  const auto pts = surface_voxels(hull);
  PointCloudFrame<T> f;
  f.positions.resize(Eigen::Index(pts.size()), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) f.positions.row(Eigen::Index(i)) = pts[i].transpose();
  f.dynamic.assign(pts.size(), dynamic ? 1 : 0);
  return f;
}

}  // namespace peel4d
