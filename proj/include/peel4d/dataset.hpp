#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "peel4d/camera.hpp"
#include "peel4d/errors.hpp"
#include "peel4d/image.hpp"
#include "peel4d/scene.hpp"

namespace peel4d {

// Multi-view video: cameras plus per-(view, frame) RGB images and binary
// dynamic-region masks.
struct Dataset {
  std::filesystem::path root;
  int views = 0;
  int frames = 0;
  double fps = 30;
  BBox<double> bbox;
  Vec3<double> background = Vec3<double>::Zero();
  std::vector<Camera<double>> cameras;
  std::vector<std::vector<Image<float>>> images;  // [view][frame]
  std::vector<std::vector<Image<float>>> masks;   // [view][frame]

  // Pixels that differ from the background color in view v at frame f.
  Image<float> scene_mask(int v, int f) const {
    const auto& img = images[std::size_t(v)][std::size_t(f)];
    Image<float> m(img.width, img.height, 1);
    for (std::size_t p = 0; p < img.pixel_count(); ++p) {
      double d = 0;
      for (int c = 0; c < 3; ++c) d = std::max(d, std::abs(double(img.data[p * 3 + c]) - background[c]));
      m.data[p] = d > 2.0 / 255.0 ? 1.f : 0.f;
    }
    return m;
  }
};

inline std::string frame_file(int frame) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d.png", frame);
  return buf;
}

// Analytic scene: a textured diffuse sphere translating along a parabola above
// a static checkerboard ground plane (z = 0, world z up), lit by one
// directional light. Rendered by exact ray casting through pixel centers.
struct SyntheticScene {
  double sphere_radius = 0.3;
  Vec3<double> start{-0.6, -0.1, 0.35};
  Vec3<double> end{0.6, 0.1, 0.35};
  double arc_height = 0.6;
  double plane_half = 1.5;
  double checker = 0.375;
  Vec3<double> light = Vec3<double>(0.4, 0.3, 1.0).normalized();
  double ambient = 0.25;
  double texture_phase = 0;
  int frames = 10;

  Vec3<double> sphere_center(double t) const {
    Vec3<double> c = start + t * (end - start);
    c.z() += arc_height * 4.0 * t * (1.0 - t);
    return c;
  }

  double time_of(int frame) const { return SceneSequence<double>::normalized_time(frame, frames); }

  BBox<double> bbox() const { return {Vec3<double>(-plane_half, -plane_half, -0.02), Vec3<double>(plane_half, plane_half, 1.3)}; }

  // Ray-sphere hit distance along a unit direction, if any.
  std::optional<double> hit_sphere(const Vec3<double>& o, const Vec3<double>& d, double t) const {
    const Vec3<double> oc = o - sphere_center(t);
    const double b = oc.dot(d);
    const double c = oc.squaredNorm() - sphere_radius * sphere_radius;
    const double disc = b * b - c;
    if (disc < 0) return std::nullopt;
    const double s = -b - std::sqrt(disc);
    if (s <= 0) return std::nullopt;
    return s;
  }

  std::optional<double> hit_plane(const Vec3<double>& o, const Vec3<double>& d) const {
    if (std::abs(d.z()) < 1e-12) return std::nullopt;
    const double s = -o.z() / d.z();
    if (s <= 0) return std::nullopt;
    const Vec3<double> p = o + s * d;
    if (std::abs(p.x()) > plane_half || std::abs(p.y()) > plane_half) return std::nullopt;
    return s;
  }

  Vec3<double> sphere_albedo(const Vec3<double>& n) const {
    const double phi = std::atan2(n.y(), n.x());
    const double theta = std::acos(std::clamp(n.z(), -1.0, 1.0));
    return {0.55 + 0.35 * std::sin(3.0 * phi + texture_phase), 0.5 + 0.3 * std::cos(4.0 * theta),
            0.45 + 0.3 * std::sin(2.0 * phi + 2.0 * theta + texture_phase)};
  }

  Vec3<double> plane_albedo(const Vec3<double>& p) const {
    const long ix = std::lround(std::floor((p.x() + plane_half) / checker));
    const long iy = std::lround(std::floor((p.y() + plane_half) / checker));
    return ((ix + iy) % 2 == 0) ? Vec3<double>(0.85, 0.8, 0.7) : Vec3<double>(0.35, 0.42, 0.55);
  }

  double shade(const Vec3<double>& n) const { return ambient + (1.0 - ambient) * std::max(0.0, n.dot(light)); }

  // Renders RGB and the exact sphere-silhouette mask for one camera.
  void render(const Camera<double>& cam, int frame, Image<float>& rgb, Image<float>& mask) const {
    const double t = time_of(frame);
    rgb = Image<float>(cam.width, cam.height, 3);
    mask = Image<float>(cam.width, cam.height, 1);
    const Vec3<double> o = cam.center();
    for (int y = 0; y < cam.height; ++y)
      for (int x = 0; x < cam.width; ++x) {
        const Vec3<double> dc((x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0);
        const Vec3<double> d = (cam.R.transpose() * dc).normalized();
        const auto hs = hit_sphere(o, d, t);
        const auto hp = hit_plane(o, d);
        Vec3<double> c = Vec3<double>::Zero();
        if (hs && (!hp || *hs <= *hp)) {
          const Vec3<double> n = (o + *hs * d - sphere_center(t)).normalized();
          c = sphere_albedo(n) * shade(n);
          mask(x, y, 0) = 1.f;
        } else if (hp) {
          c = plane_albedo(o + *hp * d) * shade(Vec3<double>::UnitZ());
        }
        for (int k = 0; k < 3; ++k) rgb(x, y, k) = float(c[k]);
      }
  }
};

struct SyntheticSpec {
  int views = 8;
  int frames = 10;
  int width = 128;
  int height = 128;
  std::uint64_t seed = 7;
  double ring_radius = 3.2;
  double ring_height = 2.0;
  double fov_deg = 45.0;
  double fps = 30.0;
};

inline SyntheticScene synthetic_scene(const SyntheticSpec& spec) {
  SyntheticScene s;
  s.frames = spec.frames;
  std::mt19937_64 rng(spec.seed);
  s.texture_phase = std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng);
  return s;
}

// Camera on the capture ring at azimuth `azimuth_rad`.
inline Camera<double> ring_camera(const SyntheticSpec& spec, double azimuth_rad) {
  const Vec3<double> eye(spec.ring_radius * std::cos(azimuth_rad), spec.ring_radius * std::sin(azimuth_rad),
                         spec.ring_height);
  return look_at<double>(eye, Vec3<double>(0, 0, 0.35), Vec3<double>::UnitZ(), spec.fov_deg * std::numbers::pi / 180.0,
                         spec.width, spec.height, 0.1, 20.0);
}

inline double ring_azimuth(const SyntheticSpec& spec, int view) {
  return 2.0 * std::numbers::pi * view / spec.views + 0.1;
}

// Ring camera halfway between capture views v and v+1, never used for
// training.
inline Camera<double> heldout_camera(const SyntheticSpec& spec, int v = 0) {
  return ring_camera(spec, 0.5 * (ring_azimuth(spec, v) + ring_azimuth(spec, v + 1)));
}

// Ground truth for an arbitrary camera, quantized like the stored images.
inline Image<float> synthetic_ground_truth(const SyntheticSpec& spec, const Camera<double>& cam, int frame) {
  Image<float> rgb, mask;
  synthetic_scene(spec).render(cam, frame, rgb, mask);
  for (auto& x : rgb.data) x = float(to_u8(x)) / 255.f;
  return rgb;
}

namespace detail {

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << j.dump(2) << "\n";
  if (!f) throw std::runtime_error("short write to " + p.string());
}

inline nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw DatasetError("missing file " + p.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError("malformed json in " + p.string() + ": " + e.what());
  }
}

template <class T>
void write_gray_png(const std::filesystem::path& path, const Image<T>& m) {
  std::vector<std::uint8_t> px(m.pixel_count());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = m.data[i] >= T(0.5) ? 255 : 0;
  write_file(path, encode_png(px, m.width, m.height, 1));
}

}  // namespace detail

// Writes a synthetic dataset under out_dir and returns it loaded in memory.
inline Dataset generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  if (spec.views < 2 || spec.frames < 1 || spec.width < 8 || spec.height < 8)
    throw ConfigError("synthetic dataset needs >= 2 views, >= 1 frame and >= 8x8 pixels");
  std::error_code ec;
  fs::create_directories(out_dir / "cameras", ec);
  if (ec) throw std::runtime_error("cannot create " + (out_dir / "cameras").string() + ": " + ec.message());
  const auto scene = synthetic_scene(spec);
  Dataset ds;
  ds.root = out_dir;
  ds.views = spec.views;
  ds.frames = spec.frames;
  ds.fps = spec.fps;
  ds.bbox = scene.bbox();
  ds.images.resize(std::size_t(spec.views));
  ds.masks.resize(std::size_t(spec.views));
  for (int v = 0; v < spec.views; ++v) {
    const auto cam = ring_camera(spec, ring_azimuth(spec, v));
    ds.cameras.push_back(cam);
    const std::string name = std::to_string(v);
    detail::write_json(out_dir / "cameras" / (name + ".json"), camera_to_json(cam));
    fs::create_directories(out_dir / "images" / name);
    fs::create_directories(out_dir / "masks" / name);
    for (int f = 0; f < spec.frames; ++f) {
      Image<float> rgb, mask;
      scene.render(cam, f, rgb, mask);
      // Store exactly what a reload yields (8-bit quantized).
      for (auto& x : rgb.data) x = float(to_u8(x)) / 255.f;
      write_png(out_dir / "images" / name / frame_file(f), rgb);
      detail::write_gray_png(out_dir / "masks" / name / frame_file(f), mask);
      ds.images[std::size_t(v)].push_back(std::move(rgb));
      ds.masks[std::size_t(v)].push_back(std::move(mask));
    }
  }
  nlohmann::json manifest;
  manifest["views"] = spec.views;
  manifest["frames"] = spec.frames;
  manifest["fps"] = spec.fps;
  manifest["bbox"] = {{"min", {ds.bbox.min.x(), ds.bbox.min.y(), ds.bbox.min.z()}},
                      {"max", {ds.bbox.max.x(), ds.bbox.max.y(), ds.bbox.max.z()}}};
  manifest["background"] = {0.0, 0.0, 0.0};
  manifest["synthetic"] = {{"seed", spec.seed},
                           {"width", spec.width},
                           {"height", spec.height},
                           {"ring_radius", spec.ring_radius},
                           {"ring_height", spec.ring_height},
                           {"fov_deg", spec.fov_deg}};
  detail::write_json(out_dir / "manifest.json", manifest);
  return ds;
}

// Loads and validates a dataset directory; every failure names the offending
// path.
inline Dataset load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DatasetError("dataset directory not found: " + root.string());
  const auto manifest_path = root / "manifest.json";
  const auto man = detail::read_json(manifest_path);
  Dataset ds;
  ds.root = root;
  try {
    ds.views = man.at("views").get<int>();
    ds.frames = man.at("frames").get<int>();
    ds.fps = man.value("fps", 30.0);
    const auto& bmin = man.at("bbox").at("min");
    const auto& bmax = man.at("bbox").at("max");
    ds.bbox = BBox<double>(Vec3<double>(bmin[0].get<double>(), bmin[1].get<double>(), bmin[2].get<double>()),
                           Vec3<double>(bmax[0].get<double>(), bmax[1].get<double>(), bmax[2].get<double>()));
    if (man.contains("background"))
      for (int c = 0; c < 3; ++c) ds.background[c] = man["background"][std::size_t(c)].get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError("invalid manifest " + manifest_path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DatasetError("invalid manifest " + manifest_path.string() + ": " + e.what());
  }
  if (ds.views < 1 || ds.frames < 1) throw DatasetError("manifest " + manifest_path.string() + " has no views or frames");
  ds.images.resize(std::size_t(ds.views));
  ds.masks.resize(std::size_t(ds.views));
  for (int v = 0; v < ds.views; ++v) {
    const std::string name = std::to_string(v);
    const auto cam_path = root / "cameras" / (name + ".json");
    try {
      ds.cameras.push_back(camera_from_json<double>(detail::read_json(cam_path)));
    } catch (const ConfigError& e) {
      throw DatasetError("invalid camera " + cam_path.string() + ": " + e.what());
    }
    const auto& cam = ds.cameras.back();
    for (int f = 0; f < ds.frames; ++f) {
      const auto img_path = root / "images" / name / frame_file(f);
      const auto mask_path = root / "masks" / name / frame_file(f);
      if (!fs::exists(img_path)) throw DatasetError("missing image " + img_path.string());
      if (!fs::exists(mask_path)) throw DatasetError("missing mask " + mask_path.string());
      DecodedPng img, mask;
      try {
        img = decode_png(read_file(img_path));
      } catch (const FormatError& e) {
        throw DatasetError("unreadable image " + img_path.string() + ": " + e.what());
      }
      try {
        mask = decode_png(read_file(mask_path));
      } catch (const FormatError& e) {
        throw DatasetError("unreadable mask " + mask_path.string() + ": " + e.what());
      }
      if (img.width != cam.width || img.height != cam.height || img.channels != 3)
        throw DatasetError("image " + img_path.string() + " does not match its camera (" + std::to_string(cam.width) +
                           "x" + std::to_string(cam.height) + " RGB)");
      if (mask.width != cam.width || mask.height != cam.height || mask.channels != 1)
        throw DatasetError("mask " + mask_path.string() + " does not match its camera (" + std::to_string(cam.width) +
                           "x" + std::to_string(cam.height) + " gray)");
      Image<float> rgb(img.width, img.height, 3);
      for (std::size_t i = 0; i < img.pixels.size(); ++i) rgb.data[i] = float(img.pixels[i]) / 255.f;
      Image<float> m(mask.width, mask.height, 1);
      for (std::size_t i = 0; i < mask.pixels.size(); ++i) {
        const auto b = mask.pixels[i];
        if (b != 0 && b != 255)
          throw DatasetError("mask " + mask_path.string() + " is not binary (pixel value " + std::to_string(b) + ")");
        m.data[i] = b >= 128 ? 1.f : 0.f;
      }
      ds.images[std::size_t(v)].push_back(std::move(rgb));
      ds.masks[std::size_t(v)].push_back(std::move(m));
    }
  }
  return ds;
}

// Spec echoed into manifest.json by generate_synthetic, if present.
inline std::optional<SyntheticSpec> synthetic_spec_of(const Dataset& ds) {
  std::ifstream f(ds.root / "manifest.json");
  if (!f) return std::nullopt;
  const auto man = nlohmann::json::parse(f, nullptr, false);
  if (man.is_discarded() || !man.contains("synthetic")) return std::nullopt;
  const auto& s = man["synthetic"];
  SyntheticSpec spec;
  spec.views = ds.views;
  spec.frames = ds.frames;
  spec.fps = ds.fps;
  spec.seed = s.value("seed", std::uint64_t(7));
  spec.width = s.value("width", 128);
  spec.height = s.value("height", 128);
  spec.ring_radius = s.value("ring_radius", 3.2);
  spec.ring_height = s.value("ring_height", 2.0);
  spec.fov_deg = s.value("fov_deg", 45.0);
  return spec;
}

}  // namespace peel4d
