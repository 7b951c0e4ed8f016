#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <random>
#include <span>

#include "peel4d/image.hpp"
#include "peel4d/mlp.hpp"
#include "peel4d/sh.hpp"

namespace peel4d {

enum class ImageFeatureMode { passthrough, shallow_conv };

inline constexpr int kConvChannels = 8;

struct HeadConfig {
  int feature_dim = 48;
  int hidden = 64;
  int hidden_layers = 2;
  int sh_degree = 2;
  ImageFeatureMode image_mode = ImageFeatureMode::passthrough;
  double r_min = 1e-4;
};

inline int image_feature_dim(ImageFeatureMode mode) { return mode == ImageFeatureMode::passthrough ? 3 : kConvChannels; }

// One trainable 3x3 convolution over RGB with ReLU, zero padded.
// weights[(o * 3 + c) * 9 + ky * 3 + kx].
template <class T>
struct ShallowConv {
  std::array<T, kConvChannels * 3 * 9> weights{};
  std::array<T, kConvChannels> bias{};

  template <class Rng>
  void init(Rng& rng) {
    const double a = 1.0 / std::sqrt(27.0);
    std::uniform_real_distribution<double> dist(-a, a);
    for (auto& w : weights) w = T(dist(rng));
    bias.fill(T(0));
  }

  template <class U>
  ShallowConv<U> cast() const {
    ShallowConv<U> c;
    for (std::size_t i = 0; i < weights.size(); ++i) c.weights[i] = U(weights[i]);
    for (std::size_t i = 0; i < bias.size(); ++i) c.bias[i] = U(bias[i]);
    return c;
  }
};

// Predictors fed by the 6d point feature: geometry (radius, density),
// spherical-harmonics coefficients, and source-view blend logits.
template <class T>
struct HeadSet {
  HeadConfig config;
  Mlp<T> geometry;
  Mlp<T> sh;
  Mlp<T> blend;
  ShallowConv<T> conv;

  HeadSet() = default;
  explicit HeadSet(const HeadConfig& cfg) : config(cfg) {
    if (cfg.sh_degree < 0 || cfg.sh_degree > kMaxShDegree) throw ConfigError("sh degree must be in [0, 3]");
    auto widths = [&](int in, int out) {
      std::vector<int> w{in};
      for (int i = 0; i < cfg.hidden_layers; ++i) w.push_back(cfg.hidden);
      w.push_back(out);
      return w;
    };
    geometry = Mlp<T>(widths(cfg.feature_dim, 2), {Activation::softplus, Activation::sigmoid});
    const int sh_out = 3 * sh_basis_count(cfg.sh_degree);
    sh = Mlp<T>(widths(cfg.feature_dim, sh_out), std::vector<Activation>(sh_out, Activation::identity));
    blend = Mlp<T>(widths(cfg.feature_dim + image_feature_dim(cfg.image_mode), 1), {Activation::identity});
  }

  int sh_outputs() const { return sh.output_width(); }
  int image_dim() const { return image_feature_dim(config.image_mode); }
  bool has_conv() const { return config.image_mode == ImageFeatureMode::shallow_conv; }

  template <class Rng>
  void init(Rng& rng) {
    geometry.init(rng);
    sh.init(rng);
    blend.init(rng);
    if (has_conv()) conv.init(rng);
  }

  void set_zero() {
    geometry.set_zero();
    sh.set_zero();
    blend.set_zero();
    conv.weights.fill(T(0));
    conv.bias.fill(T(0));
  }

  HeadSet zeros_like() const {
    HeadSet g = *this;
    g.set_zero();
    return g;
  }

  HeadSet& operator+=(const HeadSet& o) {
    geometry += o.geometry;
    sh += o.sh;
    blend += o.blend;
    for (std::size_t i = 0; i < conv.weights.size(); ++i) conv.weights[i] += o.conv.weights[i];
    for (std::size_t i = 0; i < conv.bias.size(); ++i) conv.bias[i] += o.conv.bias[i];
    return *this;
  }

  // Fixed tensor order: geometry, sh, blend, then conv weights/bias.
  template <class Fn>
  void for_each_tensor(Fn&& fn) {
    geometry.for_each_tensor(fn);
    sh.for_each_tensor(fn);
    blend.for_each_tensor(fn);
    fn(std::span<T>(conv.weights));
    fn(std::span<T>(conv.bias));
  }
  template <class Fn>
  void for_each_tensor(Fn&& fn) const {
    geometry.for_each_tensor(fn);
    sh.for_each_tensor(fn);
    blend.for_each_tensor(fn);
    fn(std::span<const T>(conv.weights));
    fn(std::span<const T>(conv.bias));
  }

  template <class U>
  HeadSet<U> cast() const {
    HeadSet<U> h;
    h.config = config;
    h.geometry = geometry.template cast<U>();
    h.sh = sh.template cast<U>();
    h.blend = blend.template cast<U>();
    h.conv = conv.template cast<U>();
    return h;
  }
};

template <class T>
struct Geometry {
  T radius;
  T density;
};

// Maps activated geometry-head outputs (softplus, sigmoid) to attributes.
template <class T>
Geometry<T> geometry_from_outputs(const HeadSet<T>& h, T softplus_out, T sigmoid_out) {
  return {softplus_out + T(h.config.r_min), sigmoid_out};
}

template <class T>
Geometry<T> geometry_head_eval(const HeadSet<T>& h, const Vector<T>& f) {
  const auto y = mlp_forward_batch(h.geometry, Matrix<T>(f));
  return geometry_from_outputs(h, y(0, 0), y(1, 0));
}

// SH coefficient block, basis-major: s[3*i + channel].
template <class T>
Vector<T> sh_head_eval(const HeadSet<T>& h, const Vector<T>& f) {
  return mlp_forward_batch(h.sh, Matrix<T>(f)).col(0);
}

template <class T>
T blend_head_eval(const HeadSet<T>& h, const Vector<T>& f, const Vector<T>& f_img) {
  Vector<T> x(f.size() + f_img.size());
  x << f, f_img;
  return mlp_forward_batch(h.blend, Matrix<T>(x))(0, 0);
}

// Pre-activation of the shallow convolution at pixel (px, py), all channels.
template <class T, class P>
void conv_preact(const ShallowConv<T>& conv, const Image<P>& img, int px, int py, T* out) {
  for (int o = 0; o < kConvChannels; ++o) out[o] = conv.bias[o];
  for (int ky = 0; ky < 3; ++ky) {
    const int y = py + ky - 1;
    if (y < 0 || y >= img.height) continue;
    for (int kx = 0; kx < 3; ++kx) {
      const int x = px + kx - 1;
      if (x < 0 || x >= img.width) continue;
      const P* pix = img.at(x, y);
      for (int c = 0; c < 3; ++c) {
        const T v = T(pix[c]);
        for (int o = 0; o < kConvChannels; ++o) out[o] += conv.weights[(o * 3 + c) * 9 + ky * 3 + kx] * v;
      }
    }
  }
}

// Image-side inputs of the blend head at a continuous pixel: the sampled RGB
// color and the image feature vector. Derivatives w.r.t. (u, v) are filled
// when requested.
template <class T>
struct ImageSample {
  Vec3<T> color;
  Vec3<T> dcolor_du, dcolor_dv;
  std::array<T, kConvChannels> feature{};
  std::array<T, kConvChannels> dfeature_du{}, dfeature_dv{};
};

template <class T, class P>
ImageSample<T> image_feature(const HeadSet<T>& h, const Image<P>& img, T u, T v, bool with_grad = false) {
  ImageSample<T> s;
  bilinear_sample(img, u, v, s.color.data(), with_grad ? s.dcolor_du.data() : nullptr,
                  with_grad ? s.dcolor_dv.data() : nullptr);
  if (!h.has_conv()) {
    for (int c = 0; c < 3; ++c) {
      s.feature[c] = s.color[c];
      s.dfeature_du[c] = with_grad ? s.dcolor_du[c] : T(0);
      s.dfeature_dv[c] = with_grad ? s.dcolor_dv[c] : T(0);
    }
    return s;
  }
  const auto tap = bilinear_tap(img.width, img.height, u, v);
  std::array<std::array<T, kConvChannels>, 4> corner;
  for (int k = 0; k < 4; ++k) {
    const int x = std::min(tap.x0 + (k & 1), img.width - 1), y = std::min(tap.y0 + (k >> 1), img.height - 1);
    conv_preact(h.conv, img, x, y, corner[k].data());
    for (auto& c : corner[k]) c = c > T(0) ? c : T(0);
  }
  for (int o = 0; o < kConvChannels; ++o) {
    const T a = corner[0][o], b = corner[1][o], d = corner[2][o], e = corner[3][o];
    s.feature[o] = (1 - tap.fy) * ((1 - tap.fx) * a + tap.fx * b) + tap.fy * ((1 - tap.fx) * d + tap.fx * e);
    s.dfeature_du[o] = (1 - tap.fy) * (b - a) + tap.fy * (e - d);
    s.dfeature_dv[o] = (1 - tap.fx) * (d - a) + tap.fx * (e - b);
  }
  return s;
}

// Reverse of the shallow-convolution feature sample w.r.t. conv parameters.
template <class T, class P>
void image_feature_backward(const HeadSet<T>& h, const Image<P>& img, T u, T v, std::span<const T> dfeature,
                            ShallowConv<T>& grad) {
  if (!h.has_conv()) return;
  const auto tap = bilinear_tap(img.width, img.height, u, v);
  const std::array<T, 4> w{(1 - tap.fx) * (1 - tap.fy), tap.fx * (1 - tap.fy), (1 - tap.fx) * tap.fy,
                           tap.fx * tap.fy};
  for (int k = 0; k < 4; ++k) {
    const int px = std::min(tap.x0 + (k & 1), img.width - 1), py = std::min(tap.y0 + (k >> 1), img.height - 1);
    std::array<T, kConvChannels> pre;
    conv_preact(h.conv, img, px, py, pre.data());
    for (int o = 0; o < kConvChannels; ++o) {
      if (!(pre[o] > T(0))) continue;
      const T g = w[k] * dfeature[o];
      if (g == T(0)) continue;
      grad.bias[o] += g;
      for (int ky = 0; ky < 3; ++ky) {
        const int y = py + ky - 1;
        if (y < 0 || y >= img.height) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int x = px + kx - 1;
          if (x < 0 || x >= img.width) continue;
          const P* pix = img.at(x, y);
          for (int c = 0; c < 3; ++c) grad.weights[(o * 3 + c) * 9 + ky * 3 + kx] += g * T(pix[c]);
        }
      }
    }
  }
}

}  // namespace peel4d
