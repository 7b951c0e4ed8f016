#pragma once

// Wire format of the render service. Text frames carry JSON requests and
// error replies; binary frames carry rendered images behind a 24-byte header.

#include <array>
#include <cstdint>
#include <cstring>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "peel4d/camera.hpp"
#include "peel4d/errors.hpp"
#include "peel4d/image.hpp"
#include "peel4d/scene.hpp"

namespace peel4d {

struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
};

struct RenderRequest {
  std::uint32_t id = 0;
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();  // world -> camera, row-major on the wire
  Vec3<double> t = Vec3<double>::Zero();
  double time = 0;  // normalized, clamped to [0, 1]
  int width = 0, height = 0;
  std::optional<Intrinsics> intrinsics;
};

struct RequestError {
  std::uint32_t id = 0;  // 0 when the id itself could not be read
  std::string reason;
};

using ParsedRequest = std::variant<RenderRequest, RequestError>;

// Parses one text frame. Never throws; every problem becomes a RequestError.
inline ParsedRequest parse_request(std::string_view text, int max_width, int max_height) {
  const auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) return RequestError{0, "malformed JSON"};
  if (!j.is_object()) return RequestError{0, "request must be a JSON object"};
  std::uint32_t id = 0;
  if (auto it = j.find("id"); it != j.end() && it->is_number_unsigned() && it->get<std::uint64_t>() <= 0xffffffffu)
    id = it->get<std::uint32_t>();
  else
    return RequestError{0, "missing or invalid id"};
  auto fail = [&](std::string reason) -> ParsedRequest { return RequestError{id, std::move(reason)}; };
  if (j.value("type", std::string()) != "render") return fail("unknown request type");
  RenderRequest r;
  r.id = id;
  const auto pose = j.find("pose");
  if (pose == j.end() || !pose->is_object()) return fail("missing pose");
  const auto R = pose->find("R");
  const auto t = pose->find("t");
  if (R == pose->end() || !R->is_array() || R->size() != 9) return fail("pose.R must have 9 numbers");
  if (t == pose->end() || !t->is_array() || t->size() != 3) return fail("pose.t must have 3 numbers");
  for (int k = 0; k < 9; ++k) {
    const auto& v = (*R)[std::size_t(k)];
    if (!v.is_number()) return fail("pose.R must have 9 numbers");
    r.R(k / 3, k % 3) = v.get<double>();
  }
  for (int k = 0; k < 3; ++k) {
    const auto& v = (*t)[std::size_t(k)];
    if (!v.is_number()) return fail("pose.t must have 3 numbers");
    r.t[k] = v.get<double>();
  }
  if (!r.R.allFinite() || !r.t.allFinite()) return fail("pose must be finite");
  if ((r.R * r.R.transpose() - Eigen::Matrix3d::Identity()).norm() > 1e-4 || r.R.determinant() < 0)
    return fail("pose.R is not a rotation");
  const auto time = j.find("time");
  if (time == j.end() || !time->is_number()) return fail("missing time");
  r.time = std::clamp(time->get<double>(), 0.0, 1.0);
  if (!std::isfinite(time->get<double>())) return fail("time must be finite");
  const auto w = j.find("width"), h = j.find("height");
  if (w == j.end() || h == j.end() || !w->is_number_integer() || !h->is_number_integer())
    return fail("missing width/height");
  const auto wi = w->get<std::int64_t>(), hi = h->get<std::int64_t>();
  if (wi < 1 || hi < 1) return fail("width and height must be positive");
  if (wi > max_width || hi > max_height)
    return fail("resolution exceeds the maximum " + std::to_string(max_width) + "x" + std::to_string(max_height));
  r.width = int(wi);
  r.height = int(hi);
  if (auto in = j.find("intrinsics"); in != j.end()) {
    Intrinsics k;
    try {
      k.fx = in->at("fx").get<double>();
      k.fy = in->at("fy").get<double>();
      k.cx = in->at("cx").get<double>();
      k.cy = in->at("cy").get<double>();
    } catch (const nlohmann::json::exception&) {
      return fail("intrinsics need fx, fy, cx, cy");
    }
    if (!(k.fx > 0) || !(k.fy > 0)) return fail("focal lengths must be positive");
    r.intrinsics = k;
  }
  return r;
}

inline std::string request_json(const RenderRequest& r) {
  nlohmann::json R = nlohmann::json::array(), t = nlohmann::json::array();
  for (int k = 0; k < 9; ++k) R.push_back(r.R(k / 3, k % 3));
  for (int k = 0; k < 3; ++k) t.push_back(r.t[k]);
  nlohmann::json j = {{"type", "render"}, {"id", r.id},         {"pose", {{"R", R}, {"t", t}}},
                      {"time", r.time},   {"width", r.width},   {"height", r.height}};
  if (r.intrinsics)
    j["intrinsics"] = {{"fx", r.intrinsics->fx}, {"fy", r.intrinsics->fy}, {"cx", r.intrinsics->cx}, {"cy", r.intrinsics->cy}};
  return j.dump();
}

inline std::string error_json(const RequestError& e) {
  return nlohmann::json{{"type", "error"}, {"id", e.id}, {"reason", e.reason}}.dump();
}

// Camera for a request: pose from the request, intrinsics from the request or
// else from `base` rescaled to the requested size.
template <class T>
Camera<T> request_camera(const RenderRequest& r, const Camera<T>& base) {
  Camera<T> c = base.resized(r.width, r.height);
  c.R = r.R.template cast<T>();
  c.t = r.t.template cast<T>();
  if (r.intrinsics) {
    c.fx = T(r.intrinsics->fx);
    c.fy = T(r.intrinsics->fy);
    c.cx = T(r.intrinsics->cx);
    c.cy = T(r.intrinsics->cy);
  }
  return c;
}

enum class FrameEncoding : std::uint32_t { raw_rgb8 = 0, png = 1 };

inline constexpr std::size_t kFrameHeaderBytes = 24;
inline constexpr char kFrameMagic[4] = {'F', 'R', 'M', '0'};

struct FrameHeader {
  std::uint32_t id = 0, width = 0, height = 0;
  FrameEncoding encoding = FrameEncoding::raw_rgb8;
  std::uint32_t payload_length = 0;
};

// Raw below 512x512 pixels, PNG from there on.
inline FrameEncoding default_encoding(int width, int height) {
  return std::int64_t(width) * height < 512 * 512 ? FrameEncoding::raw_rgb8 : FrameEncoding::png;
}

inline void put_u32(std::uint8_t* p, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) p[k] = std::uint8_t(v >> (8 * k));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

// Header + payload for an 8-bit RGB image.
inline std::vector<std::uint8_t> encode_frame(std::uint32_t id, std::span<const std::uint8_t> rgb, int width,
                                              int height, FrameEncoding enc) {
  std::vector<std::uint8_t> payload;
  if (enc == FrameEncoding::png)
    payload = encode_png(rgb, width, height, 3);
  else
    payload.assign(rgb.begin(), rgb.end());
  std::vector<std::uint8_t> out(kFrameHeaderBytes + payload.size());
  std::memcpy(out.data(), kFrameMagic, 4);
  put_u32(out.data() + 4, id);
  put_u32(out.data() + 8, std::uint32_t(width));
  put_u32(out.data() + 12, std::uint32_t(height));
  put_u32(out.data() + 16, std::uint32_t(enc));
  put_u32(out.data() + 20, std::uint32_t(payload.size()));
  std::memcpy(out.data() + kFrameHeaderBytes, payload.data(), payload.size());
  return out;
}

inline FrameHeader decode_frame_header(std::span<const std::uint8_t> msg) {
  if (msg.size() < kFrameHeaderBytes) throw FormatError("frame shorter than its header");
  if (std::memcmp(msg.data(), kFrameMagic, 4) != 0) throw FormatError("bad frame magic");
  FrameHeader h;
  h.id = get_u32(msg.data() + 4);
  h.width = get_u32(msg.data() + 8);
  h.height = get_u32(msg.data() + 12);
  const auto enc = get_u32(msg.data() + 16);
  if (enc > 1) throw FormatError("unknown frame encoding " + std::to_string(enc));
  h.encoding = FrameEncoding(enc);
  h.payload_length = get_u32(msg.data() + 20);
  if (msg.size() != kFrameHeaderBytes + h.payload_length) throw FormatError("frame payload length mismatch");
  return h;
}

// Decodes a frame message to packed RGB8.
inline std::vector<std::uint8_t> decode_frame_rgb(std::span<const std::uint8_t> msg, FrameHeader* header = nullptr) {
  const auto h = decode_frame_header(msg);
  if (header) *header = h;
  const auto payload = msg.subspan(kFrameHeaderBytes);
  if (h.encoding == FrameEncoding::raw_rgb8) {
    if (payload.size() != std::size_t(h.width) * h.height * 3) throw FormatError("raw frame size mismatch");
    return {payload.begin(), payload.end()};
  }
  auto png = decode_png(payload);
  if (png.width != int(h.width) || png.height != int(h.height) || png.channels != 3)
    throw FormatError("png frame does not match its header");
  return std::move(png.pixels);
}

// Latest-wins hand-off of one pending request.
class CoalescingSlot {
 public:
  // Returns true when a pending request was replaced.
  bool put(const RenderRequest& r) {
    std::lock_guard lock(m_);
    const bool replaced = pending_.has_value();
    pending_ = r;
    if (replaced) ++superseded_;
    return replaced;
  }
  std::optional<RenderRequest> take() {
    std::lock_guard lock(m_);
    auto r = std::move(pending_);
    pending_.reset();
    return r;
  }
  bool pending() const {
    std::lock_guard lock(m_);
    return pending_.has_value();
  }
  std::size_t superseded() const {
    std::lock_guard lock(m_);
    return superseded_;
  }

 private:
  mutable std::mutex m_;
  std::optional<RenderRequest> pending_;
  std::size_t superseded_ = 0;
};

}  // namespace peel4d
