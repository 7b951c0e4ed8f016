#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "peel4d/camera.hpp"
#include "peel4d/errors.hpp"

namespace peel4d {

// Interleaved H x W x C image.
template <class T>
struct Image {
  int width = 0, height = 0, channels = 0;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, int c, T fill = T(0)) : width(w), height(h), channels(c), data(std::size_t(w) * h * c, fill) {}

  bool empty() const { return data.empty(); }
  std::size_t pixel_count() const { return std::size_t(width) * height; }
  T* at(int x, int y) { return data.data() + (std::size_t(y) * width + x) * channels; }
  const T* at(int x, int y) const { return data.data() + (std::size_t(y) * width + x) * channels; }
  T& operator()(int x, int y, int c) { return at(x, y)[c]; }
  const T& operator()(int x, int y, int c) const { return at(x, y)[c]; }

  template <class U>
  Image<U> cast() const {
    Image<U> out;
    out.width = width;
    out.height = height;
    out.channels = channels;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

// Bilinear lookup with pixel centers at integer coordinates. Requires uv in
// [0, W-1] x [0, H-1]; see `inside`.
template <class T>
struct BilinearTap {
  int x0, y0;
  T fx, fy;
};

template <class T>
bool inside(const Image<T>& img, T u, T v) {
  return u >= T(0) && v >= T(0) && u <= T(img.width - 1) && v <= T(img.height - 1);
}

template <class T>
BilinearTap<T> bilinear_tap(int width, int height, T u, T v) {
  int x0 = std::clamp(static_cast<int>(std::floor(u)), 0, std::max(width - 2, 0));
  int y0 = std::clamp(static_cast<int>(std::floor(v)), 0, std::max(height - 2, 0));
  return {x0, y0, u - T(x0), v - T(y0)};
}

// out[c] = bilinear value; du/dv receive per-channel derivatives when given.
template <class T, class P>
void bilinear_sample(const Image<P>& img, T u, T v, T* out, T* du = nullptr, T* dv = nullptr) {
  const auto tap = bilinear_tap(img.width, img.height, u, v);
  const int x1 = std::min(tap.x0 + 1, img.width - 1), y1 = std::min(tap.y0 + 1, img.height - 1);
  const P* p00 = img.at(tap.x0, tap.y0);
  const P* p10 = img.at(x1, tap.y0);
  const P* p01 = img.at(tap.x0, y1);
  const P* p11 = img.at(x1, y1);
  for (int c = 0; c < img.channels; ++c) {
    const T a = T(p00[c]), b = T(p10[c]), d = T(p01[c]), e = T(p11[c]);
    out[c] = (1 - tap.fy) * ((1 - tap.fx) * a + tap.fx * b) + tap.fy * ((1 - tap.fx) * d + tap.fx * e);
    if (du) du[c] = (1 - tap.fy) * (b - a) + tap.fy * (e - d);
    if (dv) dv[c] = (1 - tap.fx) * (d - a) + tap.fx * (e - b);
  }
}

template <class T>
T mse(const Image<T>& a, const Image<T>& b) {
  if (a.data.size() != b.data.size()) throw ConfigError("mse: image size mismatch");
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = double(a.data[i]) - double(b.data[i]);
    s += d * d;
  }
  return T(s / double(a.data.size()));
}

// 10 log10(1 / MSE) for unit-range images.
template <class T>
double psnr(const Image<T>& a, const Image<T>& b) {
  const double m = double(mse(a, b));
  if (m <= 0) return 300.0;
  return 10.0 * std::log10(1.0 / m);
}

inline std::uint8_t to_u8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

template <class T>
std::vector<std::uint8_t> to_rgb8(const Image<T>& img) {
  std::vector<std::uint8_t> out(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) out[i] = to_u8(double(img.data[i]));
  return out;
}

namespace detail {

inline void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

inline void png_flush_noop(png_structp) {}

inline void png_error_throw(png_structp, png_const_charp msg) { throw FormatError(std::string("png: ") + msg); }

inline void png_warning_ignore(png_structp, png_const_charp) {}

}  // namespace detail

// Encodes 8-bit gray (channels=1) or RGB (channels=3) pixels.
inline std::vector<std::uint8_t> encode_png(std::span<const std::uint8_t> pixels, int width, int height,
                                            int channels) {
  std::vector<std::uint8_t> out;
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_throw, detail::png_warning_ignore);
  png_infop info = png_create_info_struct(png);
  try {
    png_set_write_fn(png, &out, detail::png_write_to_vector, detail::png_flush_noop);
    png_set_IHDR(png, info, width, height, 8, channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y)
      png_write_row(png, const_cast<png_bytep>(pixels.data() + std::size_t(y) * width * channels));
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

struct DecodedPng {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
};

namespace detail {

struct PngReadCursor {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;
};

inline void png_read_from_span(png_structp png, png_bytep data, png_size_t length) {
  auto* cur = static_cast<PngReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + length > cur->bytes.size()) png_error(png, "truncated stream");
  std::memcpy(data, cur->bytes.data() + cur->pos, length);
  cur->pos += length;
}

}  // namespace detail

// Decodes any 8-bit PNG into gray or RGB (alpha dropped, palettes expanded).
inline DecodedPng decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw FormatError("png: bad signature");
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_throw, detail::png_warning_ignore);
  png_infop info = png_create_info_struct(png);
  detail::PngReadCursor cursor{bytes, 0};
  DecodedPng out;
  try {
    png_set_read_fn(png, &cursor, detail::png_read_from_span);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.channels = static_cast<int>(png_get_channels(png, info));
    out.pixels.resize(std::size_t(out.width) * out.height * out.channels);
    for (int y = 0; y < out.height; ++y)
      png_read_row(png, out.pixels.data() + std::size_t(y) * out.width * out.channels, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw DatasetError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes;
  std::uint8_t buf[1 << 16];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), f)) > 0) bytes.insert(bytes.end(), buf, buf + n);
  std::fclose(f);
  return bytes;
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot write " + path.string());
  const bool ok = std::fwrite(bytes.data(), 1, bytes.size(), f) == bytes.size();
  std::fclose(f);
  if (!ok) throw std::runtime_error("short write to " + path.string());
}

// Unit-range image to 8-bit PNG (values clamped, stored as-is in the sRGB
// encoded display space the dataset images use).
template <class T>
void write_png(const std::filesystem::path& path, const Image<T>& img) {
  const auto rgb = to_rgb8(img);
  write_file(path, encode_png(rgb, img.width, img.height, img.channels));
}

template <class T>
Image<T> read_png(const std::filesystem::path& path) {
  const auto decoded = decode_png(read_file(path));
  Image<T> img(decoded.width, decoded.height, decoded.channels);
  for (std::size_t i = 0; i < decoded.pixels.size(); ++i) img.data[i] = T(decoded.pixels[i]) / T(255);
  return img;
}

}  // namespace peel4d
