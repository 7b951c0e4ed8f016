// peel4d command line: generate, train, render, benchmark, serve.
// Exit codes: 0 success, 1 runtime error, 2 usage error.

#include <CLI11.hpp>

#include <boost/asio/io_context.hpp>
#include <boost/asio/signal_set.hpp>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "peel4d/checkpoint.hpp"
#include "peel4d/dataset.hpp"
#include "peel4d/frame_cache.hpp"
#include "peel4d/inference.hpp"
#include "peel4d/service.hpp"
#include "peel4d/training.hpp"

namespace fs = std::filesystem;
using namespace peel4d;

namespace {

struct EngineArgs {
  std::string ckpt, data;
  int K = 12;
  bool fp32 = false, positions_f32 = false;

  void add(CLI::App* sub) {
    sub->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    sub->add_option("--data", data, "Dataset directory (default: the one recorded in the checkpoint)");
    sub->add_option("--K", K, "Peeling depth")->check(CLI::Range(1, 255));
    sub->add_flag("--fp32", fp32, "Keep caches in 32-bit floats");
    sub->add_flag("--positions-f32", positions_f32, "Half-float caches keep 32-bit positions");
  }

  std::unique_ptr<InferenceEngine> load() const {
    auto model = load_checkpoint<float>(ckpt);
    fs::path root = data;
    if (root.empty()) {
      if (model.config.dataset.empty()) throw DatasetError("checkpoint " + ckpt + " does not record its dataset; pass --data");
      root = fs::path(model.config.dataset);
      if (root.is_relative()) root = fs::absolute(ckpt).parent_path() / root;
    }
    auto ds = load_dataset(root);
    EngineOptions opt;
    opt.K = K;
    opt.precision = fp32 ? CachePrecision::f32 : CachePrecision::f16;
    opt.positions_f32 = positions_f32;
    return std::make_unique<InferenceEngine>(std::move(model), std::move(ds), opt);
  }
};

std::vector<Camera<float>> cameras_from_file(const std::string& path) {
  const auto j = detail::read_json(path);
  std::vector<Camera<float>> out;
  try {
    if (j.is_array())
      for (const auto& c : j) out.push_back(camera_from_json<float>(c));
    else
      out.push_back(camera_from_json<float>(j));
  } catch (const ConfigError& e) {
    throw DatasetError("invalid camera file " + path + ": " + e.what());
  }
  if (out.empty()) throw DatasetError("camera file " + path + " holds no cameras");
  return out;
}

int cmd_generate(const SyntheticSpec& spec, const std::string& out) {
  const auto ds = generate_synthetic(spec, out);
  std::printf("wrote %d views x %d frames (%dx%d) to %s\n", ds.views, ds.frames, spec.width, spec.height, out.c_str());
  return 0;
}

int cmd_train(TrainConfig cfg, const std::string& data, const std::string& out, const std::string& metrics, bool quiet) {
  const auto ds = load_dataset(data);
  cfg.checkpoint_path = out;
  // Relative to the checkpoint, so a checkpoint and its capture move together
  // and the bytes do not depend on where they were produced.
  cfg.dataset_ref = fs::relative(fs::absolute(data), fs::absolute(out).parent_path()).generic_string();
  cfg.metrics_path = metrics.empty() ? fs::path(out + ".metrics.jsonl") : fs::path(metrics);
  const int every = std::max(1, cfg.iterations / 20);
  train(ds, cfg, [&](const IterationMetrics& m) {
    if (!quiet && (m.iter + 1) % every == 0)
      std::fprintf(stderr, "iter %d  L_img %.5f  L_total %.5f  %.1f ms\n", m.iter + 1, m.img, m.total, m.wallclock_ms);
  });
  std::printf("wrote %s after %d iterations\n", out.c_str(), cfg.iterations);
  return 0;
}

struct RenderArgs {
  int orbit = 0;
  std::string camera_file, out;
  std::optional<double> time;
  std::optional<int> frame;
  int width = 0, height = 0;
};

int cmd_render(const EngineArgs& ea, const RenderArgs& ra) {
  auto engine = ea.load();
  std::vector<Camera<float>> cams;
  if (!ra.camera_file.empty()) {
    cams = cameras_from_file(ra.camera_file);
    if (ra.width > 0 && ra.height > 0)
      for (auto& c : cams) c = c.resized(ra.width, ra.height);
  } else {
    cams = orbit_cameras(engine->dataset(), ra.orbit, ra.width, ra.height);
  }
  const int n = int(cams.size());
  auto frame_of = [&](int k) {
    if (ra.frame) return *ra.frame;
    if (ra.time) return frame_for_time(*ra.time, engine->frames());
    return frame_for_time(n > 1 ? double(k) / (n - 1) : 0.0, engine->frames());
  };
  fs::create_directories(ra.out);
  for (int k = 0; k < n; ++k) {
    const int f = frame_of(k);
    engine->prefetch(frame_of(std::min(k + 1, n - 1)));
    const auto& img = engine->render(f, cams[std::size_t(k)]);
    write_png(fs::path(ra.out) / frame_file(k), img);
  }
  std::printf("wrote %d frames to %s\n", n, ra.out.c_str());
  return 0;
}

int cmd_benchmark(const EngineArgs& ea, int frame, int reps, int orbit, const std::vector<int>& res,
                  const std::string& out) {
  auto engine = ea.load();
  const auto cache = engine->cache(frame);
  const auto cams = orbit_cameras(engine->dataset(), orbit);
  std::vector<std::pair<int, int>> sizes;
  for (int r : res) sizes.emplace_back(r, r);
  const auto report = benchmark(*cache, cams, reps, sizes, ea.K);
  const auto text = benchmark_to_json(report).dump(2);
  if (out.empty()) {
    std::printf("%s\n", text.c_str());
  } else {
    std::ofstream f(out);
    if (!(f << text << '\n')) throw std::runtime_error("cannot write " + out);
  }
  return 0;
}

int cmd_serve(const EngineArgs& ea, ServiceConfig cfg) {
  auto engine = ea.load();
  engine->cache(0);  // fail before listening if frame 0 cannot be built
  RenderService svc(*engine, cfg);
  std::printf("listening on %s:%u\n", cfg.address.c_str(), unsigned(svc.port()));
  std::fflush(stdout);
  boost::asio::io_context sig_ioc;
  boost::asio::signal_set signals(sig_ioc, SIGINT, SIGTERM);
  signals.async_wait([](const boost::system::error_code&, int) {});
  sig_ioc.run();
  svc.stop();
  std::fprintf(stderr, "served %zu frames, %zu errors, %zu superseded requests\n", svc.frames_sent(),
               svc.errors_sent(), svc.superseded());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"peel4d: 4D point-cloud capture, training and real-time rendering"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  SyntheticSpec spec;
  int res = spec.width;
  std::string gen_out;
  auto* gen = app.add_subcommand("generate", "Write a synthetic multi-view video dataset");
  gen->add_option("--views", spec.views, "Camera count")->check(CLI::Range(2, 1024));
  gen->add_option("--frames", spec.frames, "Frame count")->check(CLI::Range(1, 100000));
  gen->add_option("--res", res, "Square image size in pixels")->check(CLI::Range(8, 8192));
  gen->add_option("--seed", spec.seed, "Texture seed");
  gen->add_option("--out", gen_out, "Output directory")->required();

  TrainConfig tc;
  std::string train_data, train_out, train_metrics, image_mode = "passthrough";
  bool quiet = false;
  auto* tr = app.add_subcommand("train", "Fit a model to a dataset");
  tr->add_option("--data", train_data, "Dataset directory")->required();
  tr->add_option("--out", train_out, "Checkpoint path")->required();
  tr->add_option("--iters", tc.iterations, "Iterations")->check(CLI::NonNegativeNumber);
  tr->add_option("--seed", tc.seed, "Initialisation seed");
  tr->add_option("--lr", tc.lr, "Learning rate");
  tr->add_option("--position-lr", tc.position_lr, "Point position learning rate");
  tr->add_option("--K", tc.K, "Peeling depth")->check(CLI::Range(1, 255));
  tr->add_option("--source-views", tc.source_views, "Blended source views per point")->check(CLI::PositiveNumber);
  tr->add_option("--carve-res", tc.carve_res, "Space carving resolution")->check(CLI::Range(4, 512));
  tr->add_option("--grid-res", tc.grid.spatial_res, "Feature plane resolution")->check(CLI::Range(2, 1024));
  tr->add_option("--channels", tc.grid.channels, "Channels per feature plane")->check(CLI::Range(1, 256));
  tr->add_option("--hidden", tc.heads.hidden, "Hidden width of the heads")->check(CLI::Range(1, 4096));
  tr->add_option("--image-mode", image_mode, "passthrough or shallow-conv")
      ->check(CLI::IsMember({"passthrough", "shallow-conv"}));
  tr->add_option("--checkpoint-every", tc.checkpoint_every, "Also save every N iterations")->check(CLI::NonNegativeNumber);
  tr->add_option("--metrics", train_metrics, "Metrics JSONL (default: <out>.metrics.jsonl)");
  tr->add_flag("--quiet", quiet, "No progress lines");

  EngineArgs render_engine;
  RenderArgs ra;
  auto* rd = app.add_subcommand("render", "Render a camera path to a PNG sequence");
  render_engine.add(rd);
  auto* orbit_opt = rd->add_option("--orbit", ra.orbit, "Frames on an orbit around the capture")->check(CLI::PositiveNumber);
  auto* cam_opt = rd->add_option("--camera", ra.camera_file, "Camera JSON (one camera or an array)");
  orbit_opt->excludes(cam_opt);
  rd->add_option("--out", ra.out, "Output directory")->required();
  rd->add_option("--time", ra.time, "Normalized time for every frame (default: sweep 0..1)")->check(CLI::Range(0.0, 1.0));
  rd->add_option("--frame", ra.frame, "Frame index for every frame")->check(CLI::NonNegativeNumber);
  rd->add_option("--width", ra.width, "Output width")->check(CLI::PositiveNumber);
  rd->add_option("--height", ra.height, "Output height")->check(CLI::PositiveNumber);

  EngineArgs bench_engine;
  int bench_frame = 0, bench_reps = 3, bench_orbit = 8;
  std::vector<int> bench_res{256};
  std::string bench_out;
  auto* bm = app.add_subcommand("benchmark", "Time cached rendering of one frame");
  bench_engine.add(bm);
  bm->add_option("--frame", bench_frame, "Frame to render")->check(CLI::NonNegativeNumber);
  bm->add_option("--reps", bench_reps, "Passes over the orbit")->check(CLI::PositiveNumber);
  bm->add_option("--orbit", bench_orbit, "Orbit cameras per pass")->check(CLI::PositiveNumber);
  bm->add_option("--res", bench_res, "Square resolutions")->check(CLI::Range(8, 8192))->delimiter(',');
  bm->add_option("--out", bench_out, "JSON report path (default: stdout)");

  EngineArgs serve_engine;
  ServiceConfig sc;
  int max_res = 2048;
  auto* sv = app.add_subcommand("serve", "Stream rendered frames over WebSocket");
  serve_engine.add(sv);
  sv->add_option("--address", sc.address, "Bind address");
  sv->add_option("--port", sc.port, "TCP port (0: any free port)");
  sv->add_option("--max-res", max_res, "Largest accepted width or height")->check(CLI::Range(1, 16384));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e, std::cerr, std::cerr);
    return 2;
  }

  try {
    if (*gen) {
      spec.width = spec.height = res;
      return cmd_generate(spec, gen_out);
    }
    if (*tr) {
      tc.heads.image_mode = image_mode == "passthrough" ? ImageFeatureMode::passthrough : ImageFeatureMode::shallow_conv;
      return cmd_train(tc, train_data, train_out, train_metrics, quiet);
    }
    if (*rd) {
      if (ra.orbit == 0 && ra.camera_file.empty()) {
        std::cerr << "render: one of --orbit or --camera is required\n\n" << rd->help();
        return 2;
      }
      return cmd_render(render_engine, ra);
    }
    if (*bm) return cmd_benchmark(bench_engine, bench_frame, bench_reps, bench_orbit, bench_res, bench_out);
    if (*sv) {
      sc.max_width = sc.max_height = max_res;
      return cmd_serve(serve_engine, sc);
    }
  } catch (const std::exception& e) {
    std::cerr << "peel4d: error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
