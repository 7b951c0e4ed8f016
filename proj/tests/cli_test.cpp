#include <gtest/gtest.h>
#include <signal.h>
#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "peel4d/checkpoint.hpp"
#include "peel4d/inference.hpp"
#include "test_util.hpp"
#include "ws_client.hpp"

using namespace peel4d;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

Run cli(const std::string& args) {
  static const auto dir = test::temp_dir("cli_io");
  const auto out = dir / "stdout", err = dir / "stderr";
  const std::string cmd = std::string(PEEL4D_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int st = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

// Dataset + checkpoint produced through the CLI once for all tests here.
struct Trained {
  fs::path dir = test::temp_dir("cli_e2e");
  fs::path data = dir / "d";
  fs::path ckpt = dir / "m.ckpt";
  Run gen, train;
  Trained() {
    gen = cli("generate --views 4 --frames 3 --res 48 --seed 7 --out " + data.string());
    train = cli("train --data " + data.string() + " --iters 30 --out " + ckpt.string() +
                " --carve-res 24 --grid-res 16 --channels 4 --hidden 16 --source-views 3");
  }
};

const Trained& trained() {
  static Trained t;
  return t;
}

}  // namespace

TEST(Cli, GenerateTrainRenderProducesOrbitPngs) {
  const auto& t = trained();
  ASSERT_EQ(t.gen.code, 0) << t.gen.err;
  ASSERT_EQ(t.train.code, 0) << t.train.err;
  EXPECT_TRUE(fs::exists(t.ckpt));
  // Metrics: one JSON line per iteration.
  std::ifstream metrics(t.ckpt.string() + ".metrics.jsonl");
  int lines = 0;
  for (std::string line; std::getline(metrics, line); ++lines) EXPECT_TRUE(nlohmann::json::parse(line).contains("L_total"));
  EXPECT_EQ(lines, 30);

  const auto frames = t.dir / "frames";
  const auto r = cli("render --ckpt " + t.ckpt.string() + " --orbit 30 --out " + frames.string());
  ASSERT_EQ(r.code, 0) << r.err;
  int pngs = 0;
  for (const auto& e : fs::directory_iterator(frames)) {
    ASSERT_EQ(e.path().extension(), ".png");
    const auto img = read_png<float>(e.path());
    EXPECT_EQ(img.width, 48);
    EXPECT_EQ(img.height, 48);
    ++pngs;
  }
  EXPECT_EQ(pngs, 30);
}

TEST(Cli, RenderMatchesEngine) {
  const auto& t = trained();
  ASSERT_EQ(t.train.code, 0);
  const auto out = t.dir / "one";
  const auto r = cli("render --ckpt " + t.ckpt.string() + " --data " + t.data.string() +
                     " --orbit 4 --time 1 --width 40 --height 32 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  InferenceEngine engine(load_checkpoint<float>(t.ckpt), load_dataset(t.data));
  const auto cams = orbit_cameras(engine.dataset(), 4, 40, 32);
  for (int k = 0; k < 4; ++k) {
    const auto png = decode_png(read_file(out / frame_file(k)));
    EXPECT_EQ(png.pixels, engine.render_rgb8(2, cams[std::size_t(k)])) << k;
  }
}

TEST(Cli, ServeFrameMatchesRenderBitExactly) {
  const auto& t = trained();
  ASSERT_EQ(t.train.code, 0);
  // Identity pose at t=0 at 32x24: the service's camera is capture camera 0's
  // intrinsics resized, the same camera written out for `render --camera`.
  const auto ds = load_dataset(t.data);
  RenderRequest req;
  req.id = 77;
  req.width = 32;
  req.height = 24;
  const auto cam = request_camera(req, ds.cameras[0].cast<float>());
  const auto cam_file = t.dir / "identity.json";
  {
    std::ofstream f(cam_file);
    f << camera_to_json(cam).dump();
  }
  const auto out = t.dir / "identity";
  const auto r = cli("render --ckpt " + t.ckpt.string() + " --camera " + cam_file.string() + " --time 0 --out " +
                     out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rendered = decode_png(read_file(out / frame_file(0)));

  const std::string cmd = "sh -c 'echo $$; exec " + std::string(PEEL4D_CLI) + " serve --ckpt " + t.ckpt.string() +
                          " --port 0 2>/dev/null'";
  FILE* p = popen(cmd.c_str(), "r");
  ASSERT_NE(p, nullptr);
  int pid = 0;
  unsigned port = 0;
  ASSERT_EQ(std::fscanf(p, "%d", &pid), 1);
  ASSERT_EQ(std::fscanf(p, " listening on %*[^:]:%u", &port), 1);
  {
    test::WsClient client((unsigned short)port);
    client.send_text(request_json(req));
    const auto msg = client.read();
    ASSERT_FALSE(msg.text) << msg.str();
    FrameHeader h;
    const auto rgb = decode_frame_rgb(msg.bytes, &h);
    EXPECT_EQ(h.id, 77u);
    EXPECT_EQ(rgb, rendered.pixels);
    client.send_text("]");
    EXPECT_TRUE(client.read().text);
  }
  kill(pid, SIGTERM);
  EXPECT_EQ(pclose(p), 0);
}

TEST(Cli, BenchmarkWritesJson) {
  const auto& t = trained();
  ASSERT_EQ(t.train.code, 0);
  const auto json = t.dir / "bench.json";
  const auto r = cli("benchmark --ckpt " + t.ckpt.string() + " --reps 1 --orbit 2 --res 32,64 --out " + json.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(json));
  ASSERT_EQ(j["resolutions"].size(), 2u);
  EXPECT_EQ(j["resolutions"][1]["width"], 64);
  EXPECT_EQ(j["resolutions"][0]["frames"], 2);
  EXPECT_GT(j["resolutions"][0]["fps"].get<double>(), 0);
  EXPECT_EQ(j["precision"], "f16");
}

TEST(Cli, HelpOnEverySubcommandExitsZero) {
  for (const char* sub : {"", "generate", "train", "render", "benchmark", "serve"}) {
    const auto r = cli(std::string(sub) + " --help");
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("Usage"), std::string::npos) << sub;
  }
}

TEST(Cli, UsageErrorsExitTwoWithUsageOnStderr) {
  for (const char* args : {"", "frobnicate", "train --data d --out m --bogus", "generate", "render --ckpt m --out f",
                           "generate --out d --res 3", "render --ckpt m --out f --orbit 3 --camera c.json"}) {
    const auto r = cli(args);
    EXPECT_EQ(r.code, 2) << args;
    EXPECT_NE(r.err.find("Usage"), std::string::npos) << args;
    EXPECT_TRUE(r.out.empty()) << args;
  }
}

TEST(Cli, TrainOnMissingDatasetExitsOne) {
  const auto missing = test::temp_dir("cli_missing") / "nowhere";
  const auto r = cli("train --data " + missing.string() + " --out " + (missing.parent_path() / "m.ckpt").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("dataset directory not found: " + missing.string()), std::string::npos) << r.err;
}

TEST(Cli, RuntimeErrorsExitOne) {
  const auto& t = trained();
  const auto missing_ckpt = cli("render --ckpt " + (t.dir / "none.ckpt").string() + " --orbit 2 --out " +
                                (t.dir / "x").string());
  EXPECT_EQ(missing_ckpt.code, 1);
  EXPECT_NE(missing_ckpt.err.find("none.ckpt"), std::string::npos) << missing_ckpt.err;
  const auto bad_frame = cli("render --ckpt " + t.ckpt.string() + " --orbit 2 --frame 9 --out " + (t.dir / "y").string());
  EXPECT_EQ(bad_frame.code, 1);
  EXPECT_NE(bad_frame.err.find("out of range"), std::string::npos) << bad_frame.err;
}
