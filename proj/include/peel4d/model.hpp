#pragma once

#include <random>
#include <string>

#include "peel4d/feature_grid.hpp"
#include "peel4d/heads.hpp"
#include "peel4d/losses.hpp"
#include "peel4d/scene.hpp"

namespace peel4d {

struct ModelConfig {
  FeatureGridConfig grid;
  HeadConfig heads;
  double r_px_min = 0.5;
  double r_px_max = 64.0;
  double background[3] = {0, 0, 0};
  int source_views = 4;  // N'
  MaskLossMode mask_mode = MaskLossMode::outside_hull;
  std::string dataset;  // capture the model was trained on, if recorded
};

// Everything learnable: per-frame point positions, the feature planes and
// the prediction heads.
template <class T>
struct Model {
  ModelConfig config;
  SceneSequence<T> scene;
  FeaturePlaneSet<T> planes;
  HeadSet<T> heads;

  Model() = default;
  Model(const ModelConfig& cfg, SceneSequence<T> seq) : config(cfg), scene(std::move(seq)) {
    config.grid.time_res = std::max(scene.num_frames(), 2);
    config.heads.feature_dim = 6 * config.grid.channels;
    planes = FeaturePlaneSet<T>(config.grid);
    heads = HeadSet<T>(config.heads);
  }

  template <class Rng>
  void init_parameters(Rng& rng) {
    planes.init_uniform(rng);
    heads.init(rng);
  }

  RadiusLimits<T> radius_limits() const { return {T(config.r_px_min), T(config.r_px_max)}; }
  Vec3<T> background() const { return Vec3<T>(T(config.background[0]), T(config.background[1]), T(config.background[2])); }

  template <class U>
  Model<U> cast() const {
    Model<U> m;
    m.config = config;
    m.scene.bbox = scene.bbox.template cast<U>();
    for (const auto& f : scene.frames) m.scene.frames.push_back(f.template cast<U>());
    m.planes = planes.template cast<U>();
    m.heads = heads.template cast<U>();
    return m;
  }
};

}  // namespace peel4d
