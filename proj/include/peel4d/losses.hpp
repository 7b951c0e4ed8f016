#pragma once

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "peel4d/errors.hpp"
#include "peel4d/image.hpp"

namespace peel4d {

struct LossWeights {
  double lpips = 1e-3;
  double mask = 1e-3;
};

enum class MaskLossMode { outside_hull, literal };

namespace detail {
template <class T>
void require_same_shape(const Image<T>& a, const Image<T>& b, const char* what) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels)
    throw ConfigError(std::string(what) + ": image dimensions differ");
}
}  // namespace detail

// Mean over pixels of the squared color difference (summed over channels).
// grad, when non-empty, receives dL/dC.
template <class T>
T loss_img(const Image<T>& C, const Image<T>& gt, std::span<T> grad = {}) {
  detail::require_same_shape(C, gt, "loss_img");
  const T inv_n = T(1) / T(C.pixel_count());
  T sum = 0;
  for (std::size_t i = 0; i < C.data.size(); ++i) {
    const T d = C.data[i] - gt.data[i];
    sum += d * d;
    if (!grad.empty()) grad[i] = T(2) * d * inv_n;
  }
  return sum * inv_n;
}

// Multi-scale gradient proxy for a perceptual distance. Per scale (1, 1/2,
// 1/4 via 2x2 box downsampling) the features are luma, horizontal and vertical
// luma differences; the loss averages over scales the sum over those three
// channels of the mean absolute feature difference.
template <class T>
class PerceptualProxy {
 public:
  static constexpr int kScales = 3;

  T operator()(const Image<T>& I, const Image<T>& gt, std::span<T> grad = {}) const {
    detail::require_same_shape(I, gt, "loss_perceptual");
    if (I.channels != 3) throw ConfigError("loss_perceptual expects RGB images");
    std::array<Plane, kScales> a, b;
    a[0] = luma(I);
    b[0] = luma(gt);
    for (int s = 1; s < kScales; ++s) {
      a[s] = downsample(a[s - 1]);
      b[s] = downsample(b[s - 1]);
    }
    std::array<Plane, kScales> dY;
    T total = 0;
    for (int s = 0; s < kScales; ++s) {
      const Plane& x = a[s];
      const Plane& y = b[s];
      dY[s] = Plane{x.w, x.h, std::vector<T>(x.v.size(), T(0))};
      if (x.w == 0 || x.h == 0) continue;
      const T wl = T(1) / T(kScales * x.w * x.h);
      for (std::size_t i = 0; i < x.v.size(); ++i) {
        const T d = x.v[i] - y.v[i];
        total += wl * std::abs(d);
        dY[s].v[i] += wl * sign(d);
      }
      if (x.w > 1) {
        const T wg = T(1) / T(kScales * (x.w - 1) * x.h);
        for (int r = 0; r < x.h; ++r)
          for (int c = 0; c + 1 < x.w; ++c) {
            const std::size_t i = std::size_t(r) * x.w + c;
            const T d = (x.v[i + 1] - x.v[i]) - (y.v[i + 1] - y.v[i]);
            total += wg * std::abs(d);
            dY[s].v[i + 1] += wg * sign(d);
            dY[s].v[i] -= wg * sign(d);
          }
      }
      if (x.h > 1) {
        const T wg = T(1) / T(kScales * x.w * (x.h - 1));
        for (int r = 0; r + 1 < x.h; ++r)
          for (int c = 0; c < x.w; ++c) {
            const std::size_t i = std::size_t(r) * x.w + c, j = i + x.w;
            const T d = (x.v[j] - x.v[i]) - (y.v[j] - y.v[i]);
            total += wg * std::abs(d);
            dY[s].v[j] += wg * sign(d);
            dY[s].v[i] -= wg * sign(d);
          }
      }
    }
    if (!grad.empty()) {
      for (int s = kScales - 1; s > 0; --s) upsample_add(dY[s], dY[s - 1]);
      for (std::size_t p = 0; p < I.pixel_count(); ++p) {
        grad[p * 3 + 0] = T(0.299) * dY[0].v[p];
        grad[p * 3 + 1] = T(0.587) * dY[0].v[p];
        grad[p * 3 + 2] = T(0.114) * dY[0].v[p];
      }
    }
    return total;
  }

 private:
  struct Plane {
    int w = 0, h = 0;
    std::vector<T> v;
  };

  static T sign(T d) { return d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)); }

  static Plane luma(const Image<T>& I) {
    Plane p{I.width, I.height, std::vector<T>(I.pixel_count())};
    for (std::size_t i = 0; i < I.pixel_count(); ++i)
      p.v[i] = T(0.299) * I.data[i * 3] + T(0.587) * I.data[i * 3 + 1] + T(0.114) * I.data[i * 3 + 2];
    return p;
  }

  // Floor-sized 2x2 average; trailing odd row/column dropped.
  static Plane downsample(const Plane& in) {
    Plane o{in.w / 2, in.h / 2, {}};
    o.v.assign(std::size_t(o.w) * o.h, T(0));
    for (int r = 0; r < o.h; ++r)
      for (int c = 0; c < o.w; ++c) {
        const std::size_t i = std::size_t(2 * r) * in.w + 2 * c;
        o.v[std::size_t(r) * o.w + c] = T(0.25) * (in.v[i] + in.v[i + 1] + in.v[i + in.w] + in.v[i + in.w + 1]);
      }
    return o;
  }

  static void upsample_add(const Plane& coarse, Plane& fine) {
    for (int r = 0; r < coarse.h; ++r)
      for (int c = 0; c < coarse.w; ++c) {
        const T g = T(0.25) * coarse.v[std::size_t(r) * coarse.w + c];
        const std::size_t i = std::size_t(2 * r) * fine.w + 2 * c;
        fine.v[i] += g;
        fine.v[i + 1] += g;
        fine.v[i + fine.w] += g;
        fine.v[i + fine.w + 1] += g;
      }
  }
};

template <class T>
T loss_perceptual(const Image<T>& I, const Image<T>& gt, std::span<T> grad = {}) {
  return PerceptualProxy<T>{}(I, gt, grad);
}

// Default: mean of M * (1 - gt), rendered dynamic opacity outside the hull.
// Literal: mean of M * gt.
template <class T>
T loss_msk(const Image<T>& M, const Image<T>& gt_mask, MaskLossMode mode = MaskLossMode::outside_hull,
           std::span<T> grad = {}) {
  detail::require_same_shape(M, gt_mask, "loss_msk");
  const T inv_n = T(1) / T(M.pixel_count());
  T sum = 0;
  for (std::size_t i = 0; i < M.data.size(); ++i) {
    const T w = mode == MaskLossMode::outside_hull ? T(1) - gt_mask.data[i] : gt_mask.data[i];
    sum += M.data[i] * w;
    if (!grad.empty()) grad[i] = w * inv_n;
  }
  return sum * inv_n;
}

template <class T>
struct LossTerms {
  T img = 0, lpips = 0, mask = 0, total = 0;
};

// Weighted sum of the image, perceptual and mask terms. dC and dM receive the
// gradients of the total when non-empty.
template <class T>
LossTerms<T> total_loss(const Image<T>& C, const Image<T>& gt, const Image<T>& M, const Image<T>& gt_mask,
                        const LossWeights& w, MaskLossMode mode = MaskLossMode::outside_hull, std::span<T> dC = {},
                        std::span<T> dM = {}) {
  LossTerms<T> t;
  std::vector<T> g_img, g_lp;
  if (!dC.empty()) {
    g_img.resize(C.data.size());
    g_lp.resize(C.data.size());
  }
  t.img = loss_img(C, gt, std::span<T>(g_img));
  t.lpips = w.lpips != 0 ? loss_perceptual(C, gt, std::span<T>(g_lp)) : T(0);
  t.mask = loss_msk(M, gt_mask, mode, dM);
  if (!dM.empty())
    for (auto& g : dM) g *= T(w.mask);
  t.total = t.img + T(w.lpips) * t.lpips + T(w.mask) * t.mask;
  if (!dC.empty())
    for (std::size_t i = 0; i < dC.size(); ++i) dC[i] = g_img[i] + (w.lpips != 0 ? T(w.lpips) * g_lp[i] : T(0));
  return t;
}

}  // namespace peel4d
