#pragma once

// Checkpoint layout (little-endian):
//   "4K4D" u32 version(=1) u32 section_count
//   per section: u32 name_len, name bytes, u64 payload_len, payload
// Sections (unknown ones are skipped):
//   config  JSON text (model config echo)
//   scene   f64 bbox min[3] max[3], u32 T, per frame: u32 frame_index, u32 N,
//           N*3 f32 positions (row-major), N u8 dynamic flags
//   planes  per plane xy,xz,yz,tx,ty,tz: u32 H, W, d, H*W*d f32
//   heads   u32 tensor_count, per tensor: u32 rank, rank*u32 dims, f32 data.
//           Order: geometry W0 b0 W1 b1 W2 b2, sh (same), blend (same),
//           conv weights [8,3,3,3], conv bias [8].

#include <bit>
#include <cstdint>
#include <cstring>
#include <optional>
#include <filesystem>
#include <json.hpp>
#include <span>
#include <string>
#include <vector>

#include "peel4d/errors.hpp"
#include "peel4d/image.hpp"
#include "peel4d/model.hpp"

namespace peel4d {

inline constexpr char kCheckpointMagic[4] = {'4', 'K', '4', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { bytes(&v, 2); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f32(float v) { bytes(&v, 4); }
  void f64(double v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u32(std::uint32_t(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& data() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> b, std::string what) : b_(b), what_(std::move(what)) {}
  void bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, b_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint16_t u16() {
    std::uint16_t v;
    bytes(&v, 2);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  float f32() {
    float v;
    bytes(&v, 4);
    return v;
  }
  double f64() {
    double v;
    bytes(&v, 8);
    return v;
  }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw FormatError(what_ + ": truncated data");
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["grid"] = {{"spatial_res", c.grid.spatial_res}, {"time_res", c.grid.time_res}, {"channels", c.grid.channels}};
  j["heads"] = {{"feature_dim", c.heads.feature_dim},
                {"hidden", c.heads.hidden},
                {"hidden_layers", c.heads.hidden_layers},
                {"sh_degree", c.heads.sh_degree},
                {"image_mode", c.heads.image_mode == ImageFeatureMode::passthrough ? "passthrough" : "shallow-conv"},
                {"r_min", c.heads.r_min}};
  j["r_px_min"] = c.r_px_min;
  j["r_px_max"] = c.r_px_max;
  j["background"] = {c.background[0], c.background[1], c.background[2]};
  j["source_views"] = c.source_views;
  j["mask_mode"] = c.mask_mode == MaskLossMode::outside_hull ? "outside-hull" : "literal";
  if (!c.dataset.empty()) j["dataset"] = c.dataset;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.grid.spatial_res = j.at("grid").at("spatial_res").get<int>();
    c.grid.time_res = j.at("grid").at("time_res").get<int>();
    c.grid.channels = j.at("grid").at("channels").get<int>();
    const auto& h = j.at("heads");
    c.heads.feature_dim = h.at("feature_dim").get<int>();
    c.heads.hidden = h.at("hidden").get<int>();
    c.heads.hidden_layers = h.at("hidden_layers").get<int>();
    c.heads.sh_degree = h.at("sh_degree").get<int>();
    c.heads.image_mode =
        h.at("image_mode").get<std::string>() == "passthrough" ? ImageFeatureMode::passthrough : ImageFeatureMode::shallow_conv;
    c.heads.r_min = h.at("r_min").get<double>();
    c.r_px_min = j.at("r_px_min").get<double>();
    c.r_px_max = j.at("r_px_max").get<double>();
    for (int k = 0; k < 3; ++k) c.background[k] = j.at("background")[std::size_t(k)].get<double>();
    c.source_views = j.at("source_views").get<int>();
    c.mask_mode = j.at("mask_mode").get<std::string>() == "literal" ? MaskLossMode::literal : MaskLossMode::outside_hull;
    c.dataset = j.value("dataset", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  return c;
}

namespace detail {

inline void write_section(ByteWriter& out, const std::string& name, std::vector<std::uint8_t>& payload) {
  out.str(name);
  out.u64(payload.size());
  out.bytes(payload.data(), payload.size());
}

template <class T>
void write_tensor(ByteWriter& w, std::span<const T> data, std::initializer_list<std::uint32_t> dims) {
  w.u32(std::uint32_t(dims.size()));
  std::size_t n = 1;
  for (auto d : dims) {
    w.u32(d);
    n *= d;
  }
  if (n != data.size()) throw ConfigError("checkpoint: tensor size does not match its dims");
  for (const auto& v : data) w.f32(float(v));
}

template <class T>
void read_tensor(ByteReader& r, std::span<T> data, const std::string& what) {
  const auto rank = r.u32();
  std::size_t n = 1;
  for (std::uint32_t k = 0; k < rank; ++k) n *= r.u32();
  if (n != data.size()) throw FormatError("checkpoint: tensor " + what + " has unexpected size");
  for (auto& v : data) v = T(r.f32());
}

}  // namespace detail

template <class T>
std::vector<std::uint8_t> serialize_checkpoint(const Model<T>& m) {
  ByteWriter out;
  out.bytes(kCheckpointMagic, 4);
  out.u32(kCheckpointVersion);
  out.u32(4);

  {
    auto text = model_config_to_json(m.config).dump();
    std::vector<std::uint8_t> p(text.begin(), text.end());
    detail::write_section(out, "config", p);
  }
  {
    ByteWriter w;
    for (int a = 0; a < 3; ++a) w.f64(double(m.scene.bbox.min[a]));
    for (int a = 0; a < 3; ++a) w.f64(double(m.scene.bbox.max[a]));
    w.u32(std::uint32_t(m.scene.frames.size()));
    for (const auto& f : m.scene.frames) {
      w.u32(std::uint32_t(f.frame_index));
      w.u32(std::uint32_t(f.size()));
      for (Eigen::Index i = 0; i < f.positions.size(); ++i) w.f32(float(f.positions.data()[i]));
      for (auto d : f.dynamic) w.u8(d);
    }
    detail::write_section(out, "scene", w.data());
  }
  {
    ByteWriter w;
    for (const auto& p : m.planes.planes) {
      w.u32(std::uint32_t(p.rows));
      w.u32(std::uint32_t(p.cols));
      w.u32(std::uint32_t(p.channels));
      for (const auto& v : p.data) w.f32(float(v));
    }
    detail::write_section(out, "planes", w.data());
  }
  {
    ByteWriter w;
    std::uint32_t count = 0;
    m.heads.for_each_tensor([&](auto) { ++count; });
    w.u32(count);
    auto mlp = [&](const Mlp<T>& net) {
      for (std::size_t l = 0; l < net.layers(); ++l) {
        detail::write_tensor<T>(w, std::span<const T>(net.weights[l].data(), net.weights[l].size()),
                                {std::uint32_t(net.weights[l].rows()), std::uint32_t(net.weights[l].cols())});
        detail::write_tensor<T>(w, std::span<const T>(net.biases[l].data(), net.biases[l].size()),
                                {std::uint32_t(net.biases[l].size())});
      }
    };
    mlp(m.heads.geometry);
    mlp(m.heads.sh);
    mlp(m.heads.blend);
    detail::write_tensor<T>(w, std::span<const T>(m.heads.conv.weights), {kConvChannels, 3, 3, 3});
    detail::write_tensor<T>(w, std::span<const T>(m.heads.conv.bias), {kConvChannels});
    detail::write_section(out, "heads", w.data());
  }
  return std::move(out.data());
}

template <class T>
Model<T> deserialize_checkpoint(std::span<const std::uint8_t> bytes, const std::string& what = "checkpoint") {
  ByteReader r(bytes, what);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError(what + ": bad magic (not a checkpoint)");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError(what + ": unsupported checkpoint version " + std::to_string(version));
  const auto sections = r.u32();
  std::optional<ModelConfig> cfg;
  std::optional<std::span<const std::uint8_t>> scene, planes, heads;
  for (std::uint32_t s = 0; s < sections; ++s) {
    const auto name = r.str();
    const auto len = r.u64();
    const auto payload = r.take(std::size_t(len));
    if (name == "config") {
      const auto j = nlohmann::json::parse(payload.begin(), payload.end(), nullptr, false);
      if (j.is_discarded()) throw FormatError(what + ": config section is not valid json");
      cfg = model_config_from_json(j);
    } else if (name == "scene") {
      scene = payload;
    } else if (name == "planes") {
      planes = payload;
    } else if (name == "heads") {
      heads = payload;
    }
  }
  if (!cfg || !scene || !planes || !heads) throw FormatError(what + ": missing required section");

  Model<T> m;
  m.config = *cfg;
  {
    ByteReader sr(*scene, what + " scene");
    Vec3<T> lo, hi;
    for (int a = 0; a < 3; ++a) lo[a] = T(sr.f64());
    for (int a = 0; a < 3; ++a) hi[a] = T(sr.f64());
    m.scene.bbox = BBox<T>(lo, hi);
    const auto frames = sr.u32();
    for (std::uint32_t f = 0; f < frames; ++f) {
      PointCloudFrame<T> pf;
      pf.frame_index = int(sr.u32());
      const auto n = sr.u32();
      pf.positions.resize(Eigen::Index(n), 3);
      for (Eigen::Index i = 0; i < pf.positions.size(); ++i) pf.positions.data()[i] = T(sr.f32());
      pf.dynamic.resize(n);
      for (auto& d : pf.dynamic) d = sr.u8();
      m.scene.frames.push_back(std::move(pf));
    }
  }
  m.planes = FeaturePlaneSet<T>(m.config.grid);
  {
    ByteReader pr(*planes, what + " planes");
    for (auto& p : m.planes.planes) {
      const int rows = int(pr.u32()), cols = int(pr.u32()), ch = int(pr.u32());
      if (rows != p.rows || cols != p.cols || ch != p.channels)
        throw FormatError(what + ": plane dimensions disagree with the config");
      for (auto& v : p.data) v = T(pr.f32());
    }
  }
  m.heads = HeadSet<T>(m.config.heads);
  {
    ByteReader hr(*heads, what + " heads");
    std::uint32_t expected = 0;
    m.heads.for_each_tensor([&](auto) { ++expected; });
    if (hr.u32() != expected) throw FormatError(what + ": unexpected head tensor count");
    int idx = 0;
    m.heads.for_each_tensor([&](std::span<T> t) { detail::read_tensor(hr, t, std::to_string(idx++)); });
  }
  return m;
}

template <class T>
void save_checkpoint(const Model<T>& m, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(m);
  write_file(path, bytes);
}

template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file(path);
  } catch (const DatasetError&) {
    throw FormatError("cannot open checkpoint " + path.string());
  }
  return deserialize_checkpoint<T>(bytes, path.string());
}

}  // namespace peel4d
