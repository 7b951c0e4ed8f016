#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <string>

#include "peel4d/errors.hpp"

namespace peel4d {

template <class T>
using Vec2 = Eigen::Matrix<T, 2, 1>;
template <class T>
using Vec3 = Eigen::Matrix<T, 3, 1>;
template <class T>
using Vec4 = Eigen::Matrix<T, 4, 1>;
template <class T>
using Mat3 = Eigen::Matrix<T, 3, 3>;

// Pinhole camera. Convention: x_cam = R * x_world + t, +z looks forward,
// +x right, +y down, image origin top-left, pixel centers at integer
// coordinates.
template <class T>
struct Camera {
  T fx = 1, fy = 1, cx = 0, cy = 0;
  Mat3<T> R = Mat3<T>::Identity();
  Vec3<T> t = Vec3<T>::Zero();
  int width = 1, height = 1;
  T near = T(0.01), far = T(100);

  Vec3<T> center() const { return -R.transpose() * t; }

  void validate() const {
    const double orth = (R.transpose() * R - Mat3<T>::Identity()).cwiseAbs().maxCoeff();
    if (!(orth < 1e-6) || !(std::abs(double(R.determinant()) - 1.0) < 1e-6))
      throw ConfigError("camera rotation is not a proper rotation");
    if (!(fx > 0) || !(fy > 0)) throw ConfigError("camera focal lengths must be positive");
    if (width <= 0 || height <= 0) throw ConfigError("camera image size must be positive");
    if (!(cx >= 0 && cx < width && cy >= 0 && cy < height))
      throw ConfigError("camera principal point outside the image");
    if (!(near > 0 && near < far)) throw ConfigError("camera requires 0 < near < far");
  }

  template <class U>
  Camera<U> cast() const {
    Camera<U> c;
    c.fx = U(fx);
    c.fy = U(fy);
    c.cx = U(cx);
    c.cy = U(cy);
    c.R = R.template cast<U>();
    c.t = t.template cast<U>();
    c.width = width;
    c.height = height;
    c.near = U(near);
    c.far = U(far);
    return c;
  }

  // Same camera at a different resolution; intrinsics scale with the image.
  Camera resized(int w, int h) const {
    Camera c = *this;
    const T sx = T(w) / T(width), sy = T(h) / T(height);
    c.fx = fx * sx;
    c.fy = fy * sy;
    c.cx = (cx + T(0.5)) * sx - T(0.5);
    c.cy = (cy + T(0.5)) * sy - T(0.5);
    c.width = w;
    c.height = h;
    return c;
  }
};

template <class T>
struct Projection {
  Vec2<T> uv = Vec2<T>::Zero();
  T depth = 0;
  bool visible = false;
};

// Projects a world point. `margin` widens the accepted image rectangle by a
// splat radius in pixels.
template <class T>
Projection<T> project(const Camera<T>& cam, const Vec3<T>& x, T margin = T(0)) {
  const Vec3<T> xc = cam.R * x + cam.t;
  Projection<T> p;
  p.depth = xc.z();
  if (!(p.depth >= cam.near && p.depth <= cam.far)) {
    p.visible = false;
    if (p.depth != T(0)) p.uv = Vec2<T>(cam.fx * xc.x() / p.depth + cam.cx, cam.fy * xc.y() / p.depth + cam.cy);
    return p;
  }
  p.uv = Vec2<T>(cam.fx * xc.x() / p.depth + cam.cx, cam.fy * xc.y() / p.depth + cam.cy);
  p.visible = p.uv.x() >= -margin && p.uv.x() <= T(cam.width - 1) + margin && p.uv.y() >= -margin &&
              p.uv.y() <= T(cam.height - 1) + margin;
  return p;
}

// Jacobian of (u, v, depth) with respect to the world point.
template <class T>
Eigen::Matrix<T, 3, 3> project_jacobian(const Camera<T>& cam, const Vec3<T>& x) {
  const Vec3<T> xc = cam.R * x + cam.t;
  const T iz = T(1) / xc.z();
  Eigen::Matrix<T, 3, 3> d_cam;
  d_cam << cam.fx * iz, 0, -cam.fx * xc.x() * iz * iz,  //
      0, cam.fy * iz, -cam.fy * xc.y() * iz * iz,       //
      0, 0, 1;
  return d_cam * cam.R;
}

template <class T>
Vec3<T> back_project(const Camera<T>& cam, const Vec2<T>& uv, T depth) {
  const Vec3<T> xc((uv.x() - cam.cx) / cam.fx * depth, (uv.y() - cam.cy) / cam.fy * depth, depth);
  return cam.R.transpose() * (xc - cam.t);
}

template <class T>
struct RadiusLimits {
  T min_px = T(0.5);
  T max_px = T(64);
};

template <class T>
T projected_radius(const Camera<T>& cam, T depth, T r_world, RadiusLimits<T> lim = {}) {
  return std::clamp(r_world * cam.fy / depth, lim.min_px, lim.max_px);
}

// Camera at `eye` looking at `target`; `up` is the world up direction.
template <class T>
Camera<T> look_at(const Vec3<T>& eye, const Vec3<T>& target, const Vec3<T>& up, T fov_y_rad, int width,
                  int height, T near = T(0.05), T far = T(50)) {
  const Vec3<T> fwd = (target - eye).normalized();
  const Vec3<T> right = fwd.cross(up).normalized();
  const Vec3<T> down = fwd.cross(right);
  Camera<T> c;
  c.R.row(0) = right.transpose();
  c.R.row(1) = down.transpose();
  c.R.row(2) = fwd.transpose();
  c.t = -c.R * eye;
  c.fy = T(0.5) * T(height) / std::tan(T(0.5) * fov_y_rad);
  c.fx = c.fy;
  c.cx = T(0.5) * T(width) - T(0.5);
  c.cy = T(0.5) * T(height) - T(0.5);
  c.width = width;
  c.height = height;
  c.near = near;
  c.far = far;
  return c;
}

template <class T>
nlohmann::json camera_to_json(const Camera<T>& c) {
  nlohmann::json j;
  j["fx"] = double(c.fx);
  j["fy"] = double(c.fy);
  j["cx"] = double(c.cx);
  j["cy"] = double(c.cy);
  auto R = nlohmann::json::array();
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) R.push_back(double(c.R(r, k)));
  j["R"] = R;
  j["t"] = {double(c.t.x()), double(c.t.y()), double(c.t.z())};
  j["width"] = c.width;
  j["height"] = c.height;
  j["near"] = double(c.near);
  j["far"] = double(c.far);
  return j;
}

template <class T>
Camera<T> camera_from_json(const nlohmann::json& j) {
  Camera<T> c;
  try {
    c.fx = T(j.at("fx").get<double>());
    c.fy = T(j.at("fy").get<double>());
    c.cx = T(j.at("cx").get<double>());
    c.cy = T(j.at("cy").get<double>());
    const auto& R = j.at("R");
    const auto& t = j.at("t");
    if (R.size() != 9 || t.size() != 3) throw ConfigError("camera R needs 9 values and t needs 3");
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) c.R(r, k) = T(R[r * 3 + k].get<double>());
    for (int k = 0; k < 3; ++k) c.t[k] = T(t[k].get<double>());
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    c.near = T(j.at("near").get<double>());
    c.far = T(j.at("far").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad camera json: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace peel4d
