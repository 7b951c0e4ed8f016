#pragma once

// Analytic sphere rig shared by the carving tests and the acceptance run.

#include <cmath>
#include <numbers>
#include <vector>

#include "peel4d/space_carve.hpp"

namespace peel4d::test {

struct SphereRig {
  double radius = 0.5;
  std::vector<Camera<double>> cams;
  std::vector<Image<float>> masks;
};

// `views` cameras on a ring around a sphere at the origin, alternating
// between two elevations, with silhouettes ray-traced through pixel centers.
inline SphereRig sphere_rig(double rad, int views, int res) {
  SphereRig rig;
  rig.radius = rad;
  for (int v = 0; v < views; ++v) {
    const double az = 2 * std::numbers::pi * v / views, el = (v % 2 ? 0.5 : -0.3);
    const Vec3<double> eye(3 * std::cos(az) * std::cos(el), 3 * std::sin(az) * std::cos(el), 3 * std::sin(el));
    const auto cam = look_at<double>(eye, Vec3<double>::Zero(), Vec3<double>::UnitZ(), 0.9, res, res, 0.1, 10);
    Image<float> m(res, res, 1);
    const Vec3<double> o = cam.center();
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        const Vec3<double> d =
            (cam.R.transpose() * Vec3<double>((x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1)).normalized();
        const double b = o.dot(d), c = o.squaredNorm() - rad * rad;
        m(x, y, 0) = b * b - c >= 0 ? 1.f : 0.f;
      }
    rig.cams.push_back(cam);
    rig.masks.push_back(std::move(m));
  }
  return rig;
}

struct HullCheck {
  std::size_t interior = 0, interior_missing = 0;
  std::size_t carved = 0, outside_dilation = 0;
  bool ok() const { return interior > 0 && interior_missing == 0 && outside_dilation == 0; }
};

// Interior voxels lie entirely inside the sphere; the dilation grows the set
// of voxels whose center is inside the sphere by two voxels (26-neighborhood).
inline HullCheck check_sphere_hull(const VoxelGrid<double>& g, double rad) {
  const int n = g.res;
  const double half_diag = 0.5 * std::sqrt(3.0) * g.box.extent().maxCoeff() / n;
  std::vector<std::uint8_t> inside(g.occupied.size(), 0), dil(g.occupied.size(), 0);
  HullCheck out;
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        const double d = g.center(i, j, k).norm();
        inside[g.index(i, j, k)] = d < rad;
        if (d < rad - half_diag) {
          ++out.interior;
          if (!g.at(i, j, k)) ++out.interior_missing;
        }
      }
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        if (!inside[g.index(i, j, k)]) continue;
        for (int dk = -2; dk <= 2; ++dk)
          for (int dj = -2; dj <= 2; ++dj)
            for (int di = -2; di <= 2; ++di) {
              const int a = i + di, b = j + dj, c = k + dk;
              if (a < 0 || b < 0 || c < 0 || a >= n || b >= n || c >= n) continue;
              dil[g.index(a, b, c)] = 1;
            }
      }
  for (std::size_t q = 0; q < g.occupied.size(); ++q) {
    out.carved += g.occupied[q];
    if (g.occupied[q] && !dil[q]) ++out.outside_dilation;
  }
  return out;
}

}  // namespace peel4d::test
