#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "peel4d/adam.hpp"
#include "peel4d/checkpoint.hpp"
#include "peel4d/dataset.hpp"
#include "peel4d/losses.hpp"
#include "peel4d/model.hpp"
#include "peel4d/pipeline.hpp"
#include "peel4d/space_carve.hpp"

namespace peel4d {

struct TrainConfig {
  int iterations = 5000;
  double lr = 5e-3;
  double position_lr = 1e-5;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int K = 15;
  int source_views = 4;
  std::uint64_t seed = 7;
  LossWeights weights;
  MaskLossMode mask_mode = MaskLossMode::outside_hull;
  int carve_res = 64;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  std::filesystem::path checkpoint_path;
  std::filesystem::path metrics_path;
  std::string dataset_ref;  // stored in the checkpoint as-is
  FeatureGridConfig grid;
  HeadConfig heads;

  void validate() const {
    if (iterations < 0) throw ConfigError("iterations must be non-negative");
    if (!(lr > 0) || !(position_lr > 0)) throw ConfigError("learning rates must be positive");
    if (K < 1 || K > 255) throw ConfigError("K must be in [1, 255]");
    if (source_views < 1) throw ConfigError("source view count must be positive");
    if (weights.lpips < 0 || weights.mask < 0) throw ConfigError("loss weights must be non-negative");
  }
};

struct IterationMetrics {
  int iter = 0;
  int frame = 0, view = 0;
  double img = 0, lpips = 0, mask = 0, total = 0;
  double wallclock_ms = 0;
};

// Round-robin over (frame, view). Both change every step (holding one view
// for several steps lets the heads drift toward it), and every pair recurs
// each T*V steps.
inline std::pair<int, int> schedule(int iter, int frames, int views) {
  const int k = iter % (frames * views);
  return {(k / views + k % views) % frames, k % views};
}

// Initial point clouds: per-frame visual hulls of the dynamic masks, plus a
// static background carved from the full-scene silhouettes of frame 0 (minus
// the frame-0 dynamic hull) replicated into every frame.
template <class T>
SceneSequence<T> carve_initial_scene(const Dataset& ds, int res) {
  SceneSequence<T> seq;
  seq.bbox = ds.bbox.template cast<T>();
  std::vector<Camera<T>> cams;
  for (const auto& c : ds.cameras) cams.push_back(c.template cast<T>());

  std::vector<Image<float>> scene_masks;
  for (int v = 0; v < ds.views; ++v) scene_masks.push_back(ds.scene_mask(v, 0));
  const auto static_hull = carve_hull<T>(scene_masks, cams, seq.bbox, res);

  std::vector<Vec3<T>> static_pts;
  for (int f = 0; f < ds.frames; ++f) {
    std::vector<Image<float>> masks;
    for (int v = 0; v < ds.views; ++v) masks.push_back(ds.masks[std::size_t(v)][std::size_t(f)]);
    std::vector<Vec3<T>> dyn;
    VoxelGrid<T> hull;
    bool any = false;
    for (const auto& m : masks)
      for (float x : m.data) any = any || x > 0.5f;
    if (any) {
      hull = carve_hull<T>(masks, cams, seq.bbox, res);
      dyn = surface_voxels(hull);
    }
    if (f == 0) {
      VoxelGrid<T> rest = static_hull;
      if (any)
        for (std::size_t k = 0; k < rest.occupied.size(); ++k)
          if (hull.occupied[k]) rest.occupied[k] = 0;
      static_pts = surface_voxels(rest);
    }
    PointCloudFrame<T> pf;
    pf.frame_index = f;
    pf.positions.resize(Eigen::Index(dyn.size() + static_pts.size()), 3);
    pf.dynamic.assign(dyn.size() + static_pts.size(), 0);
    Eigen::Index row = 0;
    for (const auto& p : dyn) {
      pf.dynamic[std::size_t(row)] = 1;
      pf.positions.row(row++) = p.transpose();
    }
    for (const auto& p : static_pts) pf.positions.row(row++) = p.transpose();
    pf.validate();
    seq.frames.push_back(std::move(pf));
  }
  return seq;
}

template <class T, class Rng>
Model<T> init_model(const Dataset& ds, const TrainConfig& cfg, Rng& rng) {
  ModelConfig mc;
  mc.grid = cfg.grid;
  mc.heads = cfg.heads;
  mc.source_views = cfg.source_views;
  mc.mask_mode = cfg.mask_mode;
  mc.dataset = cfg.dataset_ref;
  for (int c = 0; c < 3; ++c) mc.background[c] = ds.background[c];
  Model<T> m(mc, carve_initial_scene<T>(ds, cfg.carve_res));
  m.init_parameters(rng);
  // Start splats at about one voxel instead of softplus(0) ~ 0.69 world units.
  const Vec3<double> ext = ds.bbox.extent();
  const double voxel = ext.mean() / cfg.carve_res;
  auto& last = m.heads.geometry.biases.back();
  last[0] = T(inverse_softplus(std::max(voxel - mc.heads.r_min, 1e-6)));
  return m;
}

// Optimizer state over every parameter group. Positions keep one state per
// frame since each step only touches the sampled frame.
template <class T>
struct Optimizer {
  AdamConfig base, position;
  std::vector<AdamState<T>> planes, heads, positions;

  Optimizer(const Model<T>& m, const TrainConfig& cfg) {
    base = {cfg.lr, cfg.beta1, cfg.beta2, cfg.eps};
    position = {cfg.position_lr, cfg.beta1, cfg.beta2, cfg.eps};
    for (const auto& p : m.planes.planes) planes.emplace_back(p.data.size());
    m.heads.for_each_tensor([&](std::span<const T> t) { heads.emplace_back(t.size()); });
    for (const auto& f : m.scene.frames) positions.emplace_back(std::size_t(f.positions.size()));
  }

  void step(Model<T>& m, ModelGrads<T>& g, int frame) {
    for (int p = 0; p < 6; ++p)
      adam_step(std::span<T>(m.planes.planes[p].data), std::span<const T>(g.planes.planes[p].data), planes[p], base);
    std::vector<std::span<T>> gh;
    g.heads.for_each_tensor([&](std::span<T> t) { gh.push_back(t); });
    std::size_t k = 0;
    m.heads.for_each_tensor([&](std::span<T> t) {
      adam_step(t, std::span<const T>(gh[k]), heads[k], base);
      ++k;
    });
    auto& pos = m.scene.frames[std::size_t(frame)].positions;
    adam_step(std::span<T>(pos.data(), std::size_t(pos.size())),
              std::span<const T>(g.positions.data(), std::size_t(g.positions.size())),
              positions[std::size_t(frame)], position);
    for (Eigen::Index i = 0; i < pos.rows(); ++i) pos.row(i) = m.scene.bbox.clamp(pos.row(i).transpose()).transpose();
  }
};

// Name of the first non-finite gradient tensor, or empty.
template <class T>
std::string first_nonfinite(const ModelGrads<T>& g) {
  static const char* plane_names[6] = {"plane.xy", "plane.xz", "plane.yz", "plane.tx", "plane.ty", "plane.tz"};
  for (int p = 0; p < 6; ++p)
    for (T v : g.planes.planes[p].data)
      if (!std::isfinite(double(v))) return plane_names[p];
  std::string bad;
  auto check = [&](const char* head, const Mlp<T>& mlp) {
    for (std::size_t l = 0; l < mlp.layers() && bad.empty(); ++l) {
      if (!mlp.weights[l].allFinite()) bad = std::string(head) + ".W" + std::to_string(l);
      else if (!mlp.biases[l].allFinite()) bad = std::string(head) + ".b" + std::to_string(l);
    }
  };
  check("head.geometry", g.heads.geometry);
  check("head.sh", g.heads.sh);
  check("head.blend", g.heads.blend);
  if (!bad.empty()) return bad;
  for (T v : g.heads.conv.weights)
    if (!std::isfinite(double(v))) return "head.conv.weights";
  for (T v : g.heads.conv.bias)
    if (!std::isfinite(double(v))) return "head.conv.bias";
  if (!g.positions.allFinite()) return "positions";
  return {};
}

// Per-frame camera and image views shared by training and evaluation.
template <class T>
struct FrameSources {
  std::vector<Camera<T>> cameras;
  std::vector<std::vector<const Image<float>*>> images;  // [frame][view]

  explicit FrameSources(const Dataset& ds) {
    for (const auto& c : ds.cameras) cameras.push_back(c.template cast<T>());
    images.resize(std::size_t(ds.frames));
    for (int f = 0; f < ds.frames; ++f)
      for (int v = 0; v < ds.views; ++v) images[std::size_t(f)].push_back(&ds.images[std::size_t(v)][std::size_t(f)]);
  }

  FrameViews<T> at(int frame) const {
    return {std::span<const Camera<T>>(cameras), std::span<const Image<float>* const>(images[std::size_t(frame)])};
  }
};

template <class T>
class Trainer {
 public:
  Trainer(const Dataset& ds, Model<T> model, const TrainConfig& cfg)
      : ds_(ds), cfg_(cfg), model_(std::move(model)), opt_(model_, cfg), sources_(ds) {
    cfg_.validate();
    if (model_.scene.num_frames() != ds.frames) throw ConfigError("model frame count does not match the dataset");
  }

  const Model<T>& model() const { return model_; }
  Model<T>& model() { return model_; }
  int iteration() const { return iter_; }

  // One optimization step on the next scheduled (frame, view).
  IterationMetrics step() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto [frame, view] = schedule(iter_, ds_.frames, ds_.views);
    RenderTarget<T> target;
    target.camera = sources_.cameras[std::size_t(view)];
    target.exclude_view = view;
    target.K = cfg_.K;
    target.with_mask = true;
    const auto views = sources_.at(frame);
    render_forward(model_, frame, target, views, state_);

    const auto& gt_f = ds_.images[std::size_t(view)][std::size_t(frame)];
    const auto& mask_f = ds_.masks[std::size_t(view)][std::size_t(frame)];
    copy_image(gt_f, gt_);
    copy_image(mask_f, gt_mask_);
    dC_.assign(state_.image.color.data.size(), T(0));
    dM_.assign(state_.mask.data.size(), T(0));
    const auto terms = total_loss(state_.image.color, gt_, state_.mask, gt_mask_, cfg_.weights, cfg_.mask_mode,
                                  std::span<T>(dC_), std::span<T>(dM_));
    if (!std::isfinite(double(terms.total)))
      throw TrainingError("non-finite loss at iteration " + std::to_string(iter_) + " (tensor: loss)");
    render_backward(model_, target, views, state_, std::span<const T>(dC_), std::span<const T>(dM_), grads_);
    if (const auto bad = first_nonfinite(grads_); !bad.empty())
      throw TrainingError("non-finite gradient at iteration " + std::to_string(iter_) + " (tensor: " + bad + ")");
    opt_.step(model_, grads_, frame);

    IterationMetrics out;
    out.iter = iter_;
    out.frame = frame;
    out.view = view;
    out.img = double(terms.img);
    out.lpips = double(terms.lpips);
    out.mask = double(terms.mask);
    out.total = double(terms.total);
    out.wallclock_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    ++iter_;
    return out;
  }

 private:
  template <class P>
  static void copy_image(const Image<P>& src, Image<T>& dst) {
    dst.width = src.width;
    dst.height = src.height;
    dst.channels = src.channels;
    dst.data.assign(src.data.begin(), src.data.end());
  }

  const Dataset& ds_;
  TrainConfig cfg_;
  Model<T> model_;
  Optimizer<T> opt_;
  FrameSources<T> sources_;
  ForwardState<T> state_;
  ModelGrads<T> grads_;
  Image<T> gt_, gt_mask_;
  std::vector<T> dC_, dM_;
  int iter_ = 0;
};

// Training-path render of one frame from `cam`; exclude_view withholds one
// source view from blending (-1 keeps all).
template <class T>
Image<float> render_frame(const Model<T>& m, const FrameSources<T>& src, int frame, const Camera<T>& cam,
                          int exclude_view = -1, int K = 15) {
  RenderTarget<T> target;
  target.camera = cam;
  target.exclude_view = exclude_view;
  target.K = K;
  ForwardState<T> st;
  render_forward(m, frame, target, src.at(frame), st);
  return st.image.color.template cast<float>();
}

// Mean PSNR over every (frame, view) training image, each view rendered with
// all sources available.
template <class T>
double training_view_psnr(const Model<T>& m, const Dataset& ds, int K = 15) {
  FrameSources<T> src(ds);
  double sum = 0;
  for (int f = 0; f < ds.frames; ++f)
    for (int v = 0; v < ds.views; ++v)
      sum += psnr(render_frame(m, src, f, src.cameras[std::size_t(v)], -1, K), ds.images[std::size_t(v)][std::size_t(f)]);
  return sum / (ds.frames * ds.views);
}

inline std::string metrics_json(const IterationMetrics& m) {
  nlohmann::json j = {{"iter", m.iter},     {"L_img", m.img},     {"L_lpips", m.lpips},
                      {"L_msk", m.mask},    {"L_total", m.total}, {"wallclock_ms", m.wallclock_ms}};
  return j.dump();
}

// Full training run. `on_iter` (optional) sees every iteration's metrics.
inline Model<float> train(const Dataset& ds, const TrainConfig& cfg,
                          const std::function<void(const IterationMetrics&)>& on_iter = {}) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  Trainer<float> trainer(ds, init_model<float>(ds, cfg, rng), cfg);
  std::ofstream metrics;
  if (!cfg.metrics_path.empty()) {
    metrics.open(cfg.metrics_path);
    if (!metrics) throw DatasetError("cannot write metrics file " + cfg.metrics_path.string());
  }
  for (int i = 0; i < cfg.iterations; ++i) {
    const auto m = trainer.step();
    if (metrics) metrics << metrics_json(m) << '\n';
    if (on_iter) on_iter(m);
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() && (i + 1) % cfg.checkpoint_every == 0 &&
        i + 1 < cfg.iterations) {
      auto p = cfg.checkpoint_path;
      p += "." + std::to_string(i + 1);
      save_checkpoint(trainer.model(), p);
    }
  }
  if (!cfg.checkpoint_path.empty()) save_checkpoint(trainer.model(), cfg.checkpoint_path);
  return trainer.model();
}

}  // namespace peel4d
