#pragma once

// Network-free inference: every head output of one frame evaluated once and
// stored (optionally as half floats), then rendered by projection, peeling and
// compositing alone.

#include <Eigen/Core>
#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <thread>
#include <json.hpp>

#include "peel4d/checkpoint.hpp"
#include "peel4d/pipeline.hpp"
#include "peel4d/training.hpp"

namespace peel4d {

enum class CachePrecision : std::uint32_t { f32 = 0, f16 = 1 };

// What a cached render needs besides the per-point arrays. Shared by all
// frames of one model.
struct CacheContext {
  std::vector<Camera<float>> sources;
  Vec3<float> anchor = Vec3<float>::Zero();
  int source_views = 4;
  Vec3<float> background = Vec3<float>::Zero();
  RadiusLimits<float> limits;
  float cull_margin = 64;
  int sh_degree = 2;
};

template <class T>
CacheContext make_cache_context(const Model<T>& m, std::span<const Camera<T>> sources) {
  CacheContext c;
  for (const auto& s : sources) c.sources.push_back(s.template cast<float>());
  c.anchor = m.scene.bbox.center().template cast<float>();
  c.source_views = m.config.source_views;
  c.background = m.background().template cast<float>();
  c.limits = {float(m.config.r_px_min), float(m.config.r_px_max)};
  c.cull_margin = float(m.config.r_px_max);
  c.sh_degree = m.heads.config.sh_degree;
  return c;
}

// Per-frame arrays, in dump order:
//   positions N*3, radii N, densities N, sh N*C*3 (C = (L+1)^2, basis-major
//   like the SH head), logits N*V, colors N*V*3, visibility ceil(N*V/8) bytes
//   (bit i*V+v, LSB first).
// f32 caches keep every float array in `f32`. f16 caches keep them in `f16`,
// except that with positions_f32 the positions stay in `f32`.
struct FrameCache {
  int frame_index = 0;
  std::size_t num_points = 0;
  int num_views = 0;
  int sh_degree = 0;
  CachePrecision precision = CachePrecision::f32;
  bool positions_f32 = false;
  std::vector<float> f32;
  std::vector<Eigen::half> f16;
  std::vector<std::uint8_t> visibility;
  std::shared_ptr<const CacheContext> context;

  int sh_count() const { return sh_basis_count(sh_degree); }
  std::size_t floats_per_point() const { return 5 + 3 * std::size_t(sh_count()) + 4 * std::size_t(num_views); }
  std::size_t radius_offset() const { return 3 * num_points; }
  std::size_t density_offset() const { return 4 * num_points; }
  std::size_t sh_offset() const { return 5 * num_points; }
  std::size_t logit_offset() const { return sh_offset() + 3 * std::size_t(sh_count()) * num_points; }
  std::size_t color_offset() const { return logit_offset() + std::size_t(num_views) * num_points; }
  std::size_t visibility_bytes() const { return (num_points * std::size_t(num_views) + 7) / 8; }

  // Dequantized scalar k of the logical array sequence (positions first).
  float value(std::size_t k) const {
    if (precision == CachePrecision::f32) return f32[k];
    if (positions_f32) return k < 3 * num_points ? f32[k] : float(f16[k - 3 * num_points]);
    return float(f16[k]);
  }
  float radius(std::size_t i) const;
  float density(std::size_t i) const;

  bool visible(std::size_t i, int v) const {
    const std::size_t b = i * std::size_t(num_views) + std::size_t(v);
    return (visibility[b >> 3] >> (b & 7)) & 1;
  }

  // Bytes of array payload: 4 or 2 per float value plus the visibility bits.
  std::size_t byte_size() const {
    const std::size_t n = num_points * floats_per_point();
    if (precision == CachePrecision::f32) return 4 * n + visibility_bytes();
    const std::size_t pos = 3 * num_points;
    return positions_f32 ? 4 * pos + 2 * (n - pos) + visibility_bytes() : 2 * n + visibility_bytes();
  }
};

namespace detail {
// Largest half below 1 and smallest positive half: dequantized densities stay
// in (0, 1) and radii positive.
inline constexpr float kHalfBelowOne = 1.f - 1.f / 2048.f;
inline constexpr float kHalfTiny = 5.9604645e-8f;
inline float clamp_radius(float r) { return std::max(r, kHalfTiny); }
inline float clamp_density(float s) { return std::clamp(s, kHalfTiny, kHalfBelowOne); }
}  // namespace detail

inline float FrameCache::radius(std::size_t i) const {
  const float r = value(radius_offset() + i);
  return precision == CachePrecision::f16 ? detail::clamp_radius(r) : r;
}

inline float FrameCache::density(std::size_t i) const {
  const float s = value(density_offset() + i);
  return precision == CachePrecision::f16 ? detail::clamp_density(s) : s;
}

// Layout formula, independent of any instance.
inline std::size_t frame_cache_bytes(std::size_t n, int views, int sh_degree, CachePrecision p,
                                     bool positions_f32 = false) {
  const std::size_t c = std::size_t(sh_basis_count(sh_degree));
  const std::size_t per = 5 + 3 * c + 4 * std::size_t(views);
  const std::size_t bits = (n * std::size_t(views) + 7) / 8;
  if (p == CachePrecision::f32) return 4 * n * per + bits;
  return (positions_f32 ? 4 * 3 * n + 2 * (per - 3) * n : 2 * per * n) + bits;
}

// Evaluates the feature planes and all heads for every point of `frame`, and
// the blend logit and image sample for every (point, source view).
template <class T>
FrameCache precompute(const Model<T>& m, int frame_index, const FrameViews<T>& views,
                      std::shared_ptr<const CacheContext> ctx = nullptr, ThreadPool& pool = ThreadPool::global()) {
  if (frame_index < 0 || frame_index >= m.scene.num_frames())
    throw ConfigError("frame " + std::to_string(frame_index) + " out of range");
  if (views.cameras.size() != views.images.size()) throw ConfigError("source cameras and images differ in count");
  const auto& frame = m.scene.frames[std::size_t(frame_index)];
  FrameCache c;
  c.frame_index = frame_index;
  c.num_points = std::size_t(frame.size());
  c.num_views = int(views.cameras.size());
  c.sh_degree = m.heads.config.sh_degree;
  c.context = ctx ? std::move(ctx) : std::make_shared<const CacheContext>(make_cache_context(m, views.cameras));
  const std::size_t n = c.num_points, V = std::size_t(c.num_views), nsh = 3 * std::size_t(c.sh_count());
  c.f32.assign(n * c.floats_per_point(), 0.f);
  c.visibility.assign(c.visibility_bytes(), 0);
  std::vector<std::uint8_t> vis(n * V, 0);
  const int fd = m.planes.feature_dim(), id = m.heads.image_dim();
  const T time = m.scene.time_of(frame_index);

  for (std::size_t i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) c.f32[3 * i + std::size_t(k)] = float(frame.positions(Eigen::Index(i), k));

  parallel_chunks(n, kWorkChunks, [&](std::size_t, std::size_t b, std::size_t e) {
    const std::size_t nb = e - b;
    Matrix<T> X(fd, Eigen::Index(nb));
    for (std::size_t j = 0; j < nb; ++j) {
      const auto nq = normalize_coords(m.scene.bbox, frame.point(Eigen::Index(b + j)), time);
      sample(m.planes, nq.q, std::span<T>(X.col(Eigen::Index(j)).data(), std::size_t(fd)));
    }
    const Matrix<T> geo = mlp_forward_batch(m.heads.geometry, X);
    const Matrix<T> sh = mlp_forward_batch(m.heads.sh, X);
    for (std::size_t j = 0; j < nb; ++j) {
      const std::size_t i = b + j;
      const auto g = geometry_from_outputs(m.heads, geo(0, Eigen::Index(j)), geo(1, Eigen::Index(j)));
      c.f32[c.radius_offset() + i] = float(g.radius);
      c.f32[c.density_offset() + i] = float(g.density);
      for (std::size_t k = 0; k < nsh; ++k) c.f32[c.sh_offset() + i * nsh + k] = float(sh(Eigen::Index(k), Eigen::Index(j)));
    }
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    std::vector<ImageSample<T>> samples;
    for (std::size_t j = 0; j < nb; ++j) {
      const Vec3<T> x = frame.point(Eigen::Index(b + j));
      for (std::size_t v = 0; v < V; ++v) {
        const auto proj = project(views.cameras[v], x);
        if (!proj.visible) continue;
        pairs.emplace_back(j, v);
        samples.push_back(image_feature(m.heads, *views.images[v], proj.uv.x(), proj.uv.y()));
      }
    }
    Matrix<T> XB(fd + id, Eigen::Index(pairs.size()));
    for (std::size_t col = 0; col < pairs.size(); ++col) {
      XB.col(Eigen::Index(col)).head(fd) = X.col(Eigen::Index(pairs[col].first));
      for (int k = 0; k < id; ++k) XB(fd + k, Eigen::Index(col)) = samples[col].feature[std::size_t(k)];
    }
    const Matrix<T> logits = mlp_forward_batch(m.heads.blend, XB);
    for (std::size_t i = b; i < e; ++i)
      for (std::size_t v = 0; v < V; ++v) c.f32[c.logit_offset() + i * V + v] = invisible_logit<float>();
    for (std::size_t col = 0; col < pairs.size(); ++col) {
      const std::size_t i = b + pairs[col].first, v = pairs[col].second;
      vis[i * V + v] = 1;
      c.f32[c.logit_offset() + i * V + v] = float(logits(0, Eigen::Index(col)));
      for (int k = 0; k < 3; ++k) c.f32[c.color_offset() + (i * V + v) * 3 + std::size_t(k)] = float(samples[col].color[k]);
    }
  }, pool);
  for (std::size_t b = 0; b < vis.size(); ++b)
    if (vis[b]) c.visibility[b >> 3] |= std::uint8_t(1u << (b & 7));
  return c;
}

template <class T>
FrameCache precompute(const Model<T>& m, int frame_index, const FrameSources<T>& src,
                      std::shared_ptr<const CacheContext> ctx = nullptr) {
  return precompute(m, frame_index, src.at(frame_index), std::move(ctx));
}

struct QuantizeReport {
  std::size_t clamped = 0;  // values outside the half range, clamped to +-65504
  std::size_t non_finite = 0;
};

inline constexpr float kHalfMax = 65504.f;

inline Eigen::half to_half(float x, QuantizeReport& rep) {
  if (!std::isfinite(x)) {
    ++rep.non_finite;
    x = std::isnan(x) ? 0.f : (x > 0 ? kHalfMax : -kHalfMax);
  } else if (std::abs(x) > kHalfMax) {
    ++rep.clamped;
    x = std::clamp(x, -kHalfMax, kHalfMax);
  }
  return Eigen::half(x);
}

// Round-to-nearest-even half copy of an f32 cache. The invisible-logit
// sentinel becomes the most negative finite half.
inline FrameCache quantize_fp16(const FrameCache& in, bool keep_positions_f32 = false, QuantizeReport* report = nullptr) {
  if (in.precision != CachePrecision::f32) throw ConfigError("quantize_fp16 expects an f32 cache");
  FrameCache out = in;
  out.precision = CachePrecision::f16;
  out.positions_f32 = keep_positions_f32;
  out.f32.clear();
  out.f16.clear();
  QuantizeReport rep;
  const std::size_t pos = 3 * in.num_points;
  const std::size_t lo = in.logit_offset(), hi = in.color_offset();
  if (keep_positions_f32) out.f32.assign(in.f32.begin(), in.f32.begin() + std::ptrdiff_t(pos));
  out.f16.reserve(in.f32.size() - (keep_positions_f32 ? pos : 0));
  for (std::size_t k = keep_positions_f32 ? pos : 0; k < in.f32.size(); ++k) {
    const float x = in.f32[k];
    if (k >= lo && k < hi && x == invisible_logit<float>())
      out.f16.push_back(Eigen::half(-kHalfMax));
    else
      out.f16.push_back(to_half(x, rep));
  }
  if (report) *report = rep;
  return out;
}

// Reusable buffers for render_cached; after the first call at a given
// resolution and point count, later calls do not grow memory.
struct CachedRenderWorkspace {
  PointMatrix<float> positions;
  std::vector<float> radius, density;
  SplatSet<float> splats;
  PeelBuffer<float> buffer;
  PeelWorkspace<float> peel;
  std::vector<std::uint8_t> used;
  std::vector<std::int32_t> used_list;
  std::vector<int> selected;
  PointMatrix<float> colors;
  CompositeResult<float> image;
  std::array<std::vector<ViewSample<float>>, kWorkChunks> samples;
  std::array<std::vector<float>, kWorkChunks> weights;
  std::array<std::vector<float>, kWorkChunks> sh;
};

namespace detail {

struct F32Reader {
  const float* p;
  float operator[](std::size_t k) const { return p[k]; }
};
struct F16Reader {
  const Eigen::half* p;
  float operator[](std::size_t k) const { return float(p[k]); }
};

template <class Pos, class Arr>
void render_cached_impl(const FrameCache& c, Pos pos, Arr arr, bool clamp_attrs, const Camera<float>& cam, int K,
                        CachedRenderWorkspace& ws, ThreadPool& pool) {
  const CacheContext& ctx = *c.context;
  const std::size_t n = c.num_points, V = std::size_t(c.num_views);
  const std::size_t nsh = 3 * std::size_t(c.sh_count());
  // Offsets in `arr` count from the start of the array holding radii.
  const std::size_t base = (c.precision == CachePrecision::f16 && c.positions_f32) ? 3 * n : 0;
  ws.positions.resize(Eigen::Index(n), 3);
  ws.radius.resize(n);
  ws.density.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) ws.positions(Eigen::Index(i), k) = pos[3 * i + std::size_t(k)];
    float r = arr[c.radius_offset() - base + i], s = arr[c.density_offset() - base + i];
    if (clamp_attrs) {
      r = clamp_radius(r);
      s = clamp_density(s);
    }
    ws.radius[i] = r;
    ws.density[i] = s;
  }
  project_splats(cam, ws.positions, std::span<const float>(ws.radius), std::span<const float>(ws.density), ws.splats,
                 ctx.limits);
  for (std::size_t i = 0; i < n; ++i)
    if (ws.splats.active[i] && !project(cam, Vec3<float>(ws.positions.row(Eigen::Index(i)).transpose()), ctx.cull_margin).visible)
      ws.splats.active[i] = 0;
  depth_peel(ws.splats, cam.width, cam.height, K, ws.buffer, ws.peel, pool);

  ws.used.assign(n, 0);
  for (std::size_t p = 0; p < ws.buffer.pixel_count(); ++p)
    for (const auto& f : ws.buffer.pixel(p)) ws.used[std::size_t(f.point)] = 1;
  ws.used_list.clear();
  for (std::size_t i = 0; i < n; ++i)
    if (ws.used[i]) ws.used_list.push_back(std::int32_t(i));

  ws.selected = select_source_views(cam, std::span<const Camera<float>>(ctx.sources), ctx.source_views, ctx.anchor);
  const std::size_t ns = ws.selected.size();
  ws.colors.resize(Eigen::Index(n), 3);
  const Vec3<float> eye = cam.center();
  parallel_chunks(ws.used_list.size(), kWorkChunks, [&](std::size_t ch, std::size_t b, std::size_t e) {
    auto& samples = ws.samples[ch];
    auto& w = ws.weights[ch];
    auto& shc = ws.sh[ch];
    samples.resize(ns);
    w.resize(ns);
    shc.resize(nsh);
    for (std::size_t k = b; k < e; ++k) {
      const auto i = std::size_t(ws.used_list[k]);
      for (std::size_t s = 0; s < ns; ++s) {
        const std::size_t v = std::size_t(ws.selected[s]);
        auto& vs = samples[s];
        vs.visible = c.visible(i, int(v));
        vs.logit = vs.visible ? arr[c.logit_offset() - base + i * V + v] : invisible_logit<float>();
        for (int ch3 = 0; ch3 < 3; ++ch3) vs.color[ch3] = arr[c.color_offset() - base + (i * V + v) * 3 + std::size_t(ch3)];
      }
      const auto blend = ibr_blend<float>(std::span<const ViewSample<float>>(samples), std::span<float>(w));
      for (std::size_t q = 0; q < nsh; ++q) shc[q] = arr[c.sh_offset() - base + i * nsh + q];
      const Vec3<float> x = ws.positions.row(Eigen::Index(i)).transpose();
      const Vec3<float> rel = x - eye;
      const Vec3<float> d = rel / rel.norm();
      const Vec3<float> c_sh = eval_sh<float>(c.sh_degree, std::span<const float>(shc), d);
      ws.colors.row(Eigen::Index(i)) = point_color(blend.color, c_sh).transpose();
    }
  }, pool);
  composite(ws.buffer, ws.colors, ctx.background, ws.image, pool);
}

}  // namespace detail

// Renders a cached frame: source-view selection, softmax over cached logits,
// cached SH, peeling and compositing. No network is evaluated. The returned
// image lives in `ws`.
inline const Image<float>& render_cached(const FrameCache& c, const Camera<float>& cam, int K, CachedRenderWorkspace& ws,
                                         ThreadPool& pool = ThreadPool::global()) {
  if (!c.context) throw ConfigError("frame cache has no render context");
  if (c.precision == CachePrecision::f32) {
    detail::render_cached_impl(c, detail::F32Reader{c.f32.data()}, detail::F32Reader{c.f32.data()}, false, cam, K, ws, pool);
  } else if (c.positions_f32) {
    detail::render_cached_impl(c, detail::F32Reader{c.f32.data()}, detail::F16Reader{c.f16.data()}, true, cam, K, ws, pool);
  } else {
    detail::render_cached_impl(c, detail::F16Reader{c.f16.data()}, detail::F16Reader{c.f16.data()}, true, cam, K, ws, pool);
  }
  return ws.image.color;
}

inline Image<float> render_cached(const FrameCache& c, const Camera<float>& cam, int K = 12) {
  CachedRenderWorkspace ws;
  return render_cached(c, cam, K, ws);
}

// Optional debug dump: "4KCH", u32 version, N, V, L, precision tag
// (0 f32, 1 f16, 2 f16 with f32 positions), then the arrays in layout order.
inline constexpr std::uint32_t kCacheDumpVersion = 1;

inline std::vector<std::uint8_t> serialize_cache(const FrameCache& c) {
  ByteWriter w;
  w.bytes("4KCH", 4);
  w.u32(kCacheDumpVersion);
  w.u32(std::uint32_t(c.num_points));
  w.u32(std::uint32_t(c.num_views));
  w.u32(std::uint32_t(c.sh_degree));
  w.u32(c.precision == CachePrecision::f32 ? 0u : (c.positions_f32 ? 2u : 1u));
  for (float x : c.f32) w.f32(x);
  for (auto h : c.f16) w.u16(Eigen::numext::bit_cast<std::uint16_t>(h));
  w.bytes(c.visibility.data(), c.visibility.size());
  return std::move(w.data());
}

inline FrameCache deserialize_cache(std::span<const std::uint8_t> bytes, const std::string& what = "cache dump") {
  ByteReader r(bytes, what);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "4KCH", 4) != 0) throw FormatError(what + ": bad magic (not a cache dump)");
  const auto version = r.u32();
  if (version != kCacheDumpVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  FrameCache c;
  c.frame_index = -1;
  c.num_points = r.u32();
  c.num_views = int(r.u32());
  c.sh_degree = int(r.u32());
  const auto tag = r.u32();
  if (tag > 2) throw FormatError(what + ": unknown precision tag " + std::to_string(tag));
  c.precision = tag == 0 ? CachePrecision::f32 : CachePrecision::f16;
  c.positions_f32 = tag == 2;
  const std::size_t total = c.num_points * c.floats_per_point();
  const std::size_t n32 = tag == 0 ? total : (tag == 2 ? 3 * c.num_points : 0);
  c.f32.resize(n32);
  for (auto& x : c.f32) x = r.f32();
  c.f16.resize(total - n32);
  for (auto& h : c.f16) h = Eigen::numext::bit_cast<Eigen::half>(r.u16());
  c.visibility.resize(c.visibility_bytes());
  r.bytes(c.visibility.data(), c.visibility.size());
  return c;
}

inline void dump_cache(const FrameCache& c, const std::filesystem::path& path) {
  write_file(path, serialize_cache(c));
}

inline FrameCache read_cache_dump(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file(path);
  } catch (const std::exception&) {
    throw FormatError("cannot open cache dump " + path.string());
  }
  return deserialize_cache(bytes, path.string());
}

// Builds frame caches on a background worker. get() hands out a ready cache
// without waiting; it blocks only when the requested frame is not built yet.
class FramePrefetcher {
 public:
  using Builder = std::function<FrameCache(int)>;

  explicit FramePrefetcher(Builder build, std::size_t capacity = 3)
      : build_(std::move(build)), capacity_(std::max<std::size_t>(capacity, 2)), worker_([this] { loop(); }) {}

  FramePrefetcher(const FramePrefetcher&) = delete;
  FramePrefetcher& operator=(const FramePrefetcher&) = delete;

  ~FramePrefetcher() {
    {
      std::lock_guard lock(mutex_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }

  void prefetch(int frame) {
    std::lock_guard lock(mutex_);
    enqueue_locked(frame, false);
  }

  std::shared_ptr<const FrameCache> get(int frame) {
    std::unique_lock lock(mutex_);
    if (auto it = ready_.find(frame); it != ready_.end()) {
      touch_locked(frame);
      return it->second;
    }
    ++misses_;
    enqueue_locked(frame, true);
    done_.wait(lock, [&] { return ready_.count(frame) || errors_.count(frame); });
    if (auto e = errors_.find(frame); e != errors_.end()) {
      auto ex = e->second;
      errors_.erase(e);
      std::rethrow_exception(ex);
    }
    touch_locked(frame);
    return ready_.at(frame);
  }

  bool ready(int frame) const {
    std::lock_guard lock(mutex_);
    return ready_.count(frame) > 0;
  }

  // Number of get() calls that had to wait for a build.
  std::size_t misses() const {
    std::lock_guard lock(mutex_);
    return misses_;
  }

 private:
  void enqueue_locked(int frame, bool urgent) {
    if (ready_.count(frame) || building_ == frame) return;
    auto it = std::find(queue_.begin(), queue_.end(), frame);
    if (it != queue_.end()) {
      if (!urgent) return;
      queue_.erase(it);
    }
    if (urgent)
      queue_.push_front(frame);
    else
      queue_.push_back(frame);
    cv_.notify_all();
  }

  void touch_locked(int frame) {
    lru_.erase(std::remove(lru_.begin(), lru_.end(), frame), lru_.end());
    lru_.push_back(frame);
    while (lru_.size() > capacity_) {
      ready_.erase(lru_.front());
      lru_.pop_front();
    }
  }

  void loop() {
    std::unique_lock lock(mutex_);
    for (;;) {
      cv_.wait(lock, [&] { return stop_ || !queue_.empty(); });
      if (stop_) return;
      const int frame = queue_.front();
      queue_.pop_front();
      building_ = frame;
      lock.unlock();
      std::shared_ptr<const FrameCache> built;
      std::exception_ptr err;
      try {
        built = std::make_shared<const FrameCache>(build_(frame));
      } catch (...) {
        err = std::current_exception();
      }
      lock.lock();
      building_ = -1;
      if (err) {
        errors_[frame] = err;
      } else {
        ready_[frame] = std::move(built);
        touch_locked(frame);
      }
      done_.notify_all();
    }
  }

  Builder build_;
  std::size_t capacity_;
  mutable std::mutex mutex_;
  std::condition_variable cv_, done_;
  std::deque<int> queue_;
  std::map<int, std::shared_ptr<const FrameCache>> ready_;
  std::map<int, std::exception_ptr> errors_;
  std::deque<int> lru_;
  int building_ = -1;
  std::size_t misses_ = 0;
  bool stop_ = false;
  std::thread worker_;
};

struct BenchmarkResolution {
  int width = 0, height = 0;
  int frames = 0;
  double total_seconds = 0, mean_ms = 0, p50_ms = 0, p99_ms = 0, fps = 0;
};

struct BenchmarkReport {
  std::size_t points = 0;
  int K = 12;
  unsigned threads = 1;
  std::string precision;
  std::vector<BenchmarkResolution> resolutions;
};

inline nlohmann::json benchmark_to_json(const BenchmarkReport& r) {
  nlohmann::json res = nlohmann::json::array();
  for (const auto& x : r.resolutions)
    res.push_back({{"width", x.width},
                   {"height", x.height},
                   {"frames", x.frames},
                   {"total_seconds", x.total_seconds},
                   {"mean_ms", x.mean_ms},
                   {"p50_ms", x.p50_ms},
                   {"p99_ms", x.p99_ms},
                   {"fps", x.fps}});
  return {{"points", r.points}, {"K", r.K}, {"threads", r.threads}, {"precision", r.precision}, {"resolutions", res}};
}

// Nearest-rank percentile of sorted samples.
inline double percentile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) return 0;
  const std::size_t rank = std::size_t(std::ceil(p / 100.0 * double(sorted.size())));
  return sorted[std::min(sorted.size() - 1, rank == 0 ? 0 : rank - 1)];
}

// Times `repetitions` passes over `cameras` at each resolution (cameras are
// resized, keeping the field of view). FPS = frames / total seconds.
inline BenchmarkReport benchmark(const FrameCache& cache, std::span<const Camera<float>> cameras, int repetitions,
                                 std::span<const std::pair<int, int>> resolutions, int K = 12,
                                 ThreadPool& pool = ThreadPool::global()) {
  if (cameras.empty()) throw ConfigError("benchmark needs at least one camera");
  if (repetitions < 1) throw ConfigError("benchmark needs at least one repetition");
  BenchmarkReport rep;
  rep.points = cache.num_points;
  rep.K = K;
  rep.threads = pool.size();
  rep.precision = cache.precision == CachePrecision::f32 ? "f32" : "f16";
  CachedRenderWorkspace ws;
  using clock = std::chrono::steady_clock;
  for (const auto& [w, h] : resolutions) {
    std::vector<Camera<float>> cams;
    for (const auto& c : cameras) cams.push_back(c.resized(w, h));
    render_cached(cache, cams[0], K, ws, pool);  // warm-up
    std::vector<double> ms;
    const auto t0 = clock::now();
    for (int r = 0; r < repetitions; ++r)
      for (const auto& c : cams) {
        const auto a = clock::now();
        render_cached(cache, c, K, ws, pool);
        ms.push_back(std::chrono::duration<double, std::milli>(clock::now() - a).count());
      }
    const double total = std::chrono::duration<double>(clock::now() - t0).count();
    BenchmarkResolution x;
    x.width = w;
    x.height = h;
    x.frames = int(ms.size());
    x.total_seconds = total;
    x.fps = total > 0 ? double(ms.size()) / total : 0;
    double sum = 0;
    for (double v : ms) sum += v;
    x.mean_ms = sum / double(ms.size());
    std::sort(ms.begin(), ms.end());
    x.p50_ms = percentile(ms, 50);
    x.p99_ms = percentile(ms, 99);
    rep.resolutions.push_back(x);
  }
  return rep;
}

}  // namespace peel4d
