#pragma once

#include <Eigen/Core>
#include <array>
#include <span>

#include "peel4d/camera.hpp"
#include "peel4d/errors.hpp"

namespace peel4d {

inline constexpr int kMaxShDegree = 3;

constexpr int sh_basis_count(int degree) { return (degree + 1) * (degree + 1); }

namespace sh_const {
inline constexpr double C0 = 0.28209479177387814;
inline constexpr double C1 = 0.4886025119029199;
inline constexpr std::array<double, 5> C2{1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                                          -1.0925484305920792, 0.5462742152960396};
inline constexpr std::array<double, 7> C3{-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                                          0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                                          -0.5900435899266435};
}  // namespace sh_const

// Real orthonormal SH basis, bands 0..degree, evaluated at d (expected unit).
// `grad`, when given, receives dY/dd as (count x 3) row-major, treating d's
// components as independent polynomial variables.
template <class T>
void sh_basis(int degree, const Vec3<T>& d, T* out, T* grad = nullptr) {
  using namespace sh_const;
  if (degree < 0 || degree > kMaxShDegree) throw ConfigError("sh degree must be in [0, 3]");
  const T x = d.x(), y = d.y(), z = d.z();
  auto put = [&](int i, T v, T gx, T gy, T gz) {
    out[i] = v;
    if (grad) {
      grad[3 * i] = gx;
      grad[3 * i + 1] = gy;
      grad[3 * i + 2] = gz;
    }
  };
  put(0, T(C0), 0, 0, 0);
  if (degree < 1) return;
  put(1, T(-C1) * y, 0, T(-C1), 0);
  put(2, T(C1) * z, 0, 0, T(C1));
  put(3, T(-C1) * x, T(-C1), 0, 0);
  if (degree < 2) return;
  const T xx = x * x, yy = y * y, zz = z * z;
  put(4, T(C2[0]) * x * y, T(C2[0]) * y, T(C2[0]) * x, 0);
  put(5, T(C2[1]) * y * z, 0, T(C2[1]) * z, T(C2[1]) * y);
  put(6, T(C2[2]) * (2 * zz - xx - yy), T(C2[2]) * (-2 * x), T(C2[2]) * (-2 * y), T(C2[2]) * (4 * z));
  put(7, T(C2[3]) * x * z, T(C2[3]) * z, 0, T(C2[3]) * x);
  put(8, T(C2[4]) * (xx - yy), T(C2[4]) * (2 * x), T(C2[4]) * (-2 * y), 0);
  if (degree < 3) return;
  put(9, T(C3[0]) * y * (3 * xx - yy), T(C3[0]) * (6 * x * y), T(C3[0]) * (3 * xx - 3 * yy), 0);
  put(10, T(C3[1]) * x * y * z, T(C3[1]) * y * z, T(C3[1]) * x * z, T(C3[1]) * x * y);
  put(11, T(C3[2]) * y * (4 * zz - xx - yy), T(C3[2]) * (-2 * x * y), T(C3[2]) * (4 * zz - xx - 3 * yy),
      T(C3[2]) * (8 * y * z));
  put(12, T(C3[3]) * z * (2 * zz - 3 * xx - 3 * yy), T(C3[3]) * (-6 * x * z), T(C3[3]) * (-6 * y * z),
      T(C3[3]) * (6 * zz - 3 * xx - 3 * yy));
  put(13, T(C3[4]) * x * (4 * zz - xx - yy), T(C3[4]) * (4 * zz - 3 * xx - yy), T(C3[4]) * (-2 * x * y),
      T(C3[4]) * (8 * x * z));
  put(14, T(C3[5]) * z * (xx - yy), T(C3[5]) * (2 * x * z), T(C3[5]) * (-2 * y * z), T(C3[5]) * (xx - yy));
  put(15, T(C3[6]) * x * (xx - 3 * yy), T(C3[6]) * (3 * xx - 3 * yy), T(C3[6]) * (-6 * x * y), 0);
}

// Coefficients are stored basis-major: coeffs[3*i + channel].
template <class T>
Vec3<T> eval_sh(int degree, std::span<const T> coeffs, const Vec3<T>& d) {
  std::array<T, sh_basis_count(kMaxShDegree)> basis;
  sh_basis(degree, d, basis.data());
  Vec3<T> rgb = Vec3<T>::Zero();
  const int n = sh_basis_count(degree);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) rgb[c] += coeffs[3 * i + c] * basis[i];
  return rgb;
}

// Reverse of eval_sh: dcoeffs += basis * drgb; returns d(drgb . rgb)/dd.
template <class T>
Vec3<T> eval_sh_backward(int degree, std::span<const T> coeffs, const Vec3<T>& d, const Vec3<T>& drgb,
                         std::span<T> dcoeffs) {
  std::array<T, sh_basis_count(kMaxShDegree)> basis;
  std::array<T, 3 * sh_basis_count(kMaxShDegree)> grad;
  sh_basis(degree, d, basis.data(), grad.data());
  Vec3<T> dd = Vec3<T>::Zero();
  const int n = sh_basis_count(degree);
  for (int i = 0; i < n; ++i) {
    T s = 0;
    for (int c = 0; c < 3; ++c) {
      dcoeffs[3 * i + c] += basis[i] * drgb[c];
      s += coeffs[3 * i + c] * drgb[c];
    }
    dd += s * Vec3<T>(grad[3 * i], grad[3 * i + 1], grad[3 * i + 2]);
  }
  return dd;
}

}  // namespace peel4d
