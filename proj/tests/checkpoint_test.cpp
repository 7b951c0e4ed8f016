#include <gtest/gtest.h>

#include "peel4d/checkpoint.hpp"
#include "small_scene.hpp"

using namespace peel4d;

namespace {

Model<float> random_model(std::uint64_t seed) {
  auto m = test::small_model(seed);
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<float> n(0, 1);
  // Make every tensor distinctive, including the frame positions.
  m.heads.for_each_tensor([&](std::span<float> t) {
    for (auto& x : t) x = n(rng);
  });
  for (auto& f : m.scene.frames)
    for (Eigen::Index k = 0; k < f.positions.size(); ++k) f.positions.data()[k] += 1e-3f * n(rng);
  return m;
}

void expect_bit_equal(const Model<float>& a, const Model<float>& b) {
  EXPECT_EQ(model_config_to_json(a.config), model_config_to_json(b.config));
  EXPECT_EQ(a.scene.bbox.min, b.scene.bbox.min);
  EXPECT_EQ(a.scene.bbox.max, b.scene.bbox.max);
  ASSERT_EQ(a.scene.frames.size(), b.scene.frames.size());
  for (std::size_t f = 0; f < a.scene.frames.size(); ++f) {
    EXPECT_EQ(a.scene.frames[f].frame_index, b.scene.frames[f].frame_index);
    EXPECT_TRUE((a.scene.frames[f].positions.array() == b.scene.frames[f].positions.array()).all());
    EXPECT_EQ(a.scene.frames[f].dynamic, b.scene.frames[f].dynamic);
  }
  for (int p = 0; p < 6; ++p) {
    EXPECT_EQ(a.planes.planes[p].rows, b.planes.planes[p].rows);
    EXPECT_EQ(0, std::memcmp(a.planes.planes[p].data.data(), b.planes.planes[p].data.data(),
                             a.planes.planes[p].data.size() * sizeof(float)));
  }
  std::vector<std::vector<float>> ta, tb;
  a.heads.for_each_tensor([&](std::span<const float> t) { ta.emplace_back(t.begin(), t.end()); });
  b.heads.for_each_tensor([&](std::span<const float> t) { tb.emplace_back(t.begin(), t.end()); });
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(0, std::memcmp(ta[i].data(), tb[i].data(), ta[i].size() * 4));
}

std::string format_error(std::span<const std::uint8_t> bytes) {
  try {
    deserialize_checkpoint<float>(bytes, "ckpt");
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto m = random_model(1);
  const auto bytes = serialize_checkpoint(m);
  expect_bit_equal(m, deserialize_checkpoint<float>(bytes, "mem"));
  const auto dir = test::temp_dir("ckpt_roundtrip");
  save_checkpoint(m, dir / "m.ckpt");
  const auto back = load_checkpoint<float>(dir / "m.ckpt");
  expect_bit_equal(m, back);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST(Checkpoint, HeaderLayout) {
  const auto bytes = serialize_checkpoint(random_model(2));
  EXPECT_EQ(std::memcmp(bytes.data(), "4K4D", 4), 0);
  std::uint32_t version, sections;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&sections, bytes.data() + 8, 4);
  EXPECT_EQ(version, 1u);
  EXPECT_EQ(sections, 4u);
}

TEST(Checkpoint, TruncationIsReported) {
  const auto bytes = serialize_checkpoint(random_model(3));
  for (std::size_t cut : {std::size_t(6), std::size_t(20), bytes.size() / 2, bytes.size() - 1}) {
    const auto msg = format_error(std::span<const std::uint8_t>(bytes.data(), cut));
    EXPECT_NE(msg.find("truncated"), std::string::npos) << cut << ": " << msg;
  }
}

TEST(Checkpoint, WrongMagicAndFutureVersion) {
  auto bytes = serialize_checkpoint(random_model(4));
  auto bad = bytes;
  bad[1] = 'Q';
  EXPECT_NE(format_error(bad).find("magic"), std::string::npos);
  bad = bytes;
  bad[4] = 2;
  EXPECT_NE(format_error(bad).find("version"), std::string::npos);
}

TEST(Checkpoint, UnknownSectionsAreSkipped) {
  const auto m = random_model(5);
  auto bytes = serialize_checkpoint(m);
  std::uint32_t sections;
  std::memcpy(&sections, bytes.data() + 8, 4);
  ++sections;
  std::memcpy(bytes.data() + 8, &sections, 4);
  ByteWriter w;
  w.str("future");
  w.u64(5);
  w.bytes("hello", 5);
  bytes.insert(bytes.end(), w.data().begin(), w.data().end());
  expect_bit_equal(m, deserialize_checkpoint<float>(bytes, "mem"));
}

TEST(Checkpoint, MissingFile) {
  try {
    load_checkpoint<float>("/nonexistent/m.ckpt");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/m.ckpt"), std::string::npos);
  }
}

TEST(Checkpoint, DatasetReferenceIsOptional) {
  auto m = random_model(4);
  EXPECT_FALSE(model_config_to_json(m.config).contains("dataset"));
  EXPECT_EQ(deserialize_checkpoint<float>(serialize_checkpoint(m)).config.dataset, "");
  m.config.dataset = "../captures/d";
  EXPECT_EQ(deserialize_checkpoint<float>(serialize_checkpoint(m)).config.dataset, "../captures/d");
}
