#pragma once

// Trained model + its capture, served frame by frame from prefetched caches.
// The CLI render command and the WebSocket service both go through here so
// they produce identical pixels for identical cameras.

#include <cmath>
#include <memory>
#include <numbers>

#include "peel4d/dataset.hpp"
#include "peel4d/frame_cache.hpp"
#include "peel4d/service_protocol.hpp"

namespace peel4d {

// Point closest (least squares) to every capture camera's optical axis.
inline Vec3<double> capture_focus(const Dataset& ds) {
  Eigen::Matrix3d A = Eigen::Matrix3d::Zero();
  Vec3<double> b = Vec3<double>::Zero();
  for (const auto& c : ds.cameras) {
    const Vec3<double> d = c.R.row(2).transpose();
    const Eigen::Matrix3d P = Eigen::Matrix3d::Identity() - d * d.transpose();
    A += P;
    b += P * c.center();
  }
  if (std::abs(A.determinant()) < 1e-9) return ds.bbox.center();
  return A.ldlt().solve(b);
}

// n cameras on a circle around the world z axis through the capture focus,
// at the mean radius and height of the capture cameras, starting at camera
// 0's azimuth. Intrinsics follow camera 0 resized to width x height.
inline std::vector<Camera<float>> orbit_cameras(const Dataset& ds, int n, int width = 0, int height = 0) {
  if (ds.cameras.empty()) throw ConfigError("orbit needs at least one capture camera");
  if (n < 1) throw ConfigError("orbit needs at least one camera");
  const auto& c0 = ds.cameras[0];
  if (width <= 0) width = c0.width;
  if (height <= 0) height = c0.height;
  const Vec3<double> focus = capture_focus(ds);
  double radius = 0, dz = 0;
  for (const auto& c : ds.cameras) {
    const Vec3<double> o = c.center() - focus;
    radius += std::hypot(o.x(), o.y());
    dz += o.z();
  }
  radius /= double(ds.cameras.size());
  dz /= double(ds.cameras.size());
  const Vec3<double> o0 = c0.center() - focus;
  const double a0 = std::atan2(o0.y(), o0.x());
  const auto base = c0.resized(width, height);
  std::vector<Camera<float>> out;
  for (int k = 0; k < n; ++k) {
    const double a = a0 + 2.0 * std::numbers::pi * k / n;
    const Vec3<double> eye = focus + Vec3<double>(radius * std::cos(a), radius * std::sin(a), dz);
    auto cam = look_at<double>(eye, focus, Vec3<double>::UnitZ(), 1.0, width, height, c0.near, c0.far);
    cam.fx = base.fx;
    cam.fy = base.fy;
    cam.cx = base.cx;
    cam.cy = base.cy;
    out.push_back(cam.cast<float>());
  }
  return out;
}

struct EngineOptions {
  int K = 12;
  CachePrecision precision = CachePrecision::f16;
  bool positions_f32 = false;
  std::size_t cache_capacity = 3;
};

class InferenceEngine {
 public:
  InferenceEngine(Model<float> model, Dataset dataset, EngineOptions opt = {})
      : model_(std::move(model)), dataset_(std::move(dataset)), opt_(opt), sources_(dataset_) {
    if (model_.scene.num_frames() != dataset_.frames)
      throw ConfigError("checkpoint has " + std::to_string(model_.scene.num_frames()) + " frames but the dataset has " +
                        std::to_string(dataset_.frames));
    if (opt_.K < 1 || opt_.K > 255) throw ConfigError("K must be in [1, 255]");
    context_ = std::make_shared<const CacheContext>(make_cache_context(model_, std::span<const Camera<float>>(sources_.cameras)));
    prefetcher_ = std::make_unique<FramePrefetcher>([this](int f) { return build(f); }, opt_.cache_capacity);
  }

  InferenceEngine(const InferenceEngine&) = delete;
  InferenceEngine& operator=(const InferenceEngine&) = delete;

  int frames() const { return dataset_.frames; }
  int K() const { return opt_.K; }
  const Dataset& dataset() const { return dataset_; }
  const Model<float>& model() const { return model_; }
  const Camera<float>& base_camera() const { return sources_.cameras.front(); }

  std::shared_ptr<const FrameCache> cache(int frame) {
    check_frame(frame);
    return prefetcher_->get(frame);
  }

  void prefetch(int frame) {
    if (frame >= 0 && frame < frames()) prefetcher_->prefetch(frame);
  }

  bool cached(int frame) const { return prefetcher_->ready(frame); }

  std::size_t cache_misses() const { return prefetcher_->misses(); }

  // Not reentrant: one workspace per engine.
  const Image<float>& render(int frame, const Camera<float>& cam) {
    const auto c = cache(frame);
    return render_cached(*c, cam, opt_.K, ws_);
  }

  std::vector<std::uint8_t> render_rgb8(int frame, const Camera<float>& cam) { return to_rgb8(render(frame, cam)); }

  // Frame reply for one request, with its neighbours queued behind it.
  std::vector<std::uint8_t> serve(const RenderRequest& r) {
    const int f = frame_for_time(r.time, frames());
    const auto rgb = render_rgb8(f, request_camera(r, base_camera()));
    prefetch(f + 1);
    prefetch(f - 1);
    return encode_frame(r.id, rgb, r.width, r.height, default_encoding(r.width, r.height));
  }

 private:
  void check_frame(int frame) const {
    if (frame < 0 || frame >= frames())
      throw ConfigError("frame " + std::to_string(frame) + " out of range [0, " + std::to_string(frames()) + ")");
  }

  FrameCache build(int frame) const {
    auto c = precompute(model_, frame, sources_.at(frame), context_);
    if (opt_.precision == CachePrecision::f16) return quantize_fp16(c, opt_.positions_f32);
    return c;
  }

  Model<float> model_;
  Dataset dataset_;
  EngineOptions opt_;
  FrameSources<float> sources_;
  std::shared_ptr<const CacheContext> context_;
  CachedRenderWorkspace ws_;
  std::unique_ptr<FramePrefetcher> prefetcher_;  // last: its worker uses the members above
};

}  // namespace peel4d
