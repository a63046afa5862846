#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <functional>

#include "migc/io.hpp"
#include "migc/scene.hpp"

using namespace migc;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "migc_io";
  std::filesystem::create_directories(dir);
  return dir / name;
}

Json minimal_scene() {
  return Json::parse(R"({
    "version": 1, "global_text": "a red dog", "height": 4, "width": 4, "seed": 3,
    "instances": [{"id": "dog", "text": "red dog", "box": [0, 0, 0.5, 0.5]}]
  })");
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::kInvalidArgument;
}

std::vector<Tensor> flat_tensors(const ShaderParams<double>& p) {
  std::vector<Tensor> out;
  p.visit([&](ParamGroup, const Tensor& t) { out.push_back(t); });
  return out;
}

Tensor random_tensor(Rng& rng, Shape s) {
  Tensor t(s);
  for (auto& v : t.storage()) v = rng.normal();
  return t;
}

}  // namespace

TEST(Scene, ParsesMinimalDocument) {
  const SceneSpec s = parse_scene(minimal_scene());
  EXPECT_EQ(s.global_text, "a red dog");
  EXPECT_EQ(s.height, 4u);
  EXPECT_EQ(s.seed, 3u);
  ASSERT_EQ(s.instances.size(), 1u);
  EXPECT_EQ(std::get<TextAttribute>(s.instances[0].attribute).tokens, (std::vector<std::string>{"red", "dog"}));
  EXPECT_DOUBLE_EQ(std::get<Box>(s.instances[0].position).x2, 0.5);
}

TEST(Scene, RejectsUnknownFields) {
  Json doc = minimal_scene();
  doc["colour"] = "red";
  EXPECT_EQ(kind_of([&] { parse_scene(doc); }), ErrorKind::kSchema);
  doc = minimal_scene();
  doc["instances"][0]["extra"] = 1;
  EXPECT_EQ(kind_of([&] { parse_scene(doc); }), ErrorKind::kSchema);
}

TEST(Scene, ErrorsCarryTheFieldPath) {
  Json doc = minimal_scene();
  doc["instances"][0]["box"] = Json::array({0, 0, 1});
  try {
    parse_scene(doc);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("/instances/0/box"), std::string::npos) << e.what();
  }
}

TEST(Scene, AttributeAndPositionAreExclusive) {
  Json both = minimal_scene();
  both["instances"][0]["image"] = kBlankImageId;
  EXPECT_EQ(kind_of([&] { parse_scene(both); }), ErrorKind::kSchema);

  Json neither = minimal_scene();
  neither["instances"][0].erase("text");
  EXPECT_EQ(kind_of([&] { parse_scene(neither); }), ErrorKind::kSchema);

  Json two_positions = minimal_scene();
  two_positions["instances"][0]["mask"] = mask_to_json(PositionMap(4, 4, true));
  EXPECT_EQ(kind_of([&] { parse_scene(two_positions); }), ErrorKind::kSchema);

  Json no_position = minimal_scene();
  no_position["instances"][0].erase("box");
  EXPECT_EQ(kind_of([&] { parse_scene(no_position); }), ErrorKind::kSchema);
}

TEST(Scene, RejectsDuplicateIdsAndBadVersion) {
  Json dup = minimal_scene();
  dup["instances"].push_back(dup["instances"][0]);
  EXPECT_EQ(kind_of([&] { parse_scene(dup); }), ErrorKind::kSchema);

  Json v2 = minimal_scene();
  v2["version"] = 2;
  EXPECT_EQ(kind_of([&] { parse_scene(v2); }), ErrorKind::kSchema);
}

TEST(Scene, ReferenceImagesMustBeListed) {
  Json doc = minimal_scene();
  doc["instances"][0].erase("text");
  doc["instances"][0]["image"] = "cat_ref";
  EXPECT_EQ(kind_of([&] { parse_scene(doc); }), ErrorKind::kSchema);

  doc["reference_images"] = {{"cat_ref", "refs/cat.ppm"}};
  const SceneSpec s = parse_scene(doc, "/data/scenes");
  EXPECT_EQ(s.reference_images.at("cat_ref"), "/data/scenes/refs/cat.ppm");

  Json blank = minimal_scene();
  blank["instances"][0].erase("text");
  blank["instances"][0]["image"] = kBlankImageId;
  EXPECT_NO_THROW(parse_scene(blank));
}

TEST(Scene, MaskMustMatchResolution) {
  Json doc = minimal_scene();
  doc["instances"][0].erase("box");
  doc["instances"][0]["mask"] = mask_to_json(PositionMap(4, 5, true));
  EXPECT_EQ(kind_of([&] { parse_scene(doc); }), ErrorKind::kSchema);
  doc["instances"][0]["mask"] = mask_to_json(PositionMap(4, 4, true));
  EXPECT_NO_THROW(parse_scene(doc));
}

TEST(Scene, BoxOutsideUnitSquareRejected) {
  Json doc = minimal_scene();
  doc["instances"][0]["box"] = Json::array({0.5, 0, 0.2, 1});
  EXPECT_EQ(kind_of([&] { parse_scene(doc); }), ErrorKind::kSchema);
  doc["instances"][0]["box"] = Json::array({0, 0, 1.5, 1});
  EXPECT_EQ(kind_of([&] { parse_scene(doc); }), ErrorKind::kSchema);
}

TEST(Scene, JsonRoundTrip) {
  Json doc = minimal_scene();
  PositionMap m(4, 4);
  m.set(1, 2, true);
  m.set(3, 0, true);
  doc["instances"].push_back({{"id", "blob"}, {"image", kBlankImageId}, {"mask", mask_to_json(m)}});
  const SceneSpec a = parse_scene(doc);
  const SceneSpec b = parse_scene(scene_to_json(a));
  ASSERT_EQ(b.instances.size(), 2u);
  EXPECT_EQ(std::get<PositionMap>(b.instances[1].position), m);
  EXPECT_EQ(scene_to_json(a), scene_to_json(b));
}

TEST(Rle, KnownEncoding) {
  // Column-major: column 0 is rows {0,1,2} = {0,1,1}, column 1 = {1,0,0}.
  PositionMap m(3, 2);
  m.set(1, 0, true);
  m.set(2, 0, true);
  m.set(0, 1, true);
  EXPECT_EQ(rle_encode(m), (std::vector<std::uint64_t>{1, 3, 2}));
  EXPECT_EQ(rle_decode(3, 2, {1, 3, 2}), m);
  EXPECT_EQ(rle_encode(PositionMap(2, 2, true)), (std::vector<std::uint64_t>{0, 4}));
}

TEST(Rle, RandomRoundTrip) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = 1 + rng.next() % 9, w = 1 + rng.next() % 9;
    PositionMap m(h, w);
    for (std::size_t i = 0; i < m.size(); ++i) m.set(i, rng.uniform() < 0.4);
    const auto counts = rle_encode(m);
    std::uint64_t total = 0;
    for (auto c : counts) total += c;
    EXPECT_EQ(total, h * w);
    EXPECT_EQ(rle_decode(h, w, counts), m);
  }
}

TEST(Rle, RunsMustCoverTheMask) {
  EXPECT_EQ(kind_of([] { rle_decode(2, 2, {1, 2}); }), ErrorKind::kSchema);
  EXPECT_EQ(kind_of([] { rle_decode(2, 2, {3, 2}); }), ErrorKind::kSchema);
}

TEST(Trajectory, RoundTripIsBitExact) {
  Rng rng(4);
  std::vector<Tensor> traj;
  for (int i = 0; i < 5; ++i) traj.push_back(random_tensor(rng, {3, 2, 4}));
  const auto path = temp_file("traj.bin");
  write_trajectory(path, traj);
  const auto back = read_trajectory(path);
  ASSERT_EQ(back.size(), traj.size());
  for (std::size_t i = 0; i < traj.size(); ++i) {
    EXPECT_EQ(back[i].shape(), traj[i].shape());
    EXPECT_EQ(back[i].storage(), traj[i].storage());
  }
}

TEST(Trajectory, RejectsBadMagicVersionAndTruncation) {
  Rng rng(2);
  const auto path = temp_file("traj_bad.bin");
  write_trajectory(path, {random_tensor(rng, {2, 2, 1})});
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write_variant = [&](std::string b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << b;
  };

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  write_variant(bad_magic);
  EXPECT_EQ(kind_of([&] { read_trajectory(path); }), ErrorKind::kInput);

  std::string bad_version = bytes;
  bad_version[8] = 7;
  write_variant(bad_version);
  EXPECT_EQ(kind_of([&] { read_trajectory(path); }), ErrorKind::kInput);

  write_variant(bytes.substr(0, bytes.size() - 3));
  EXPECT_EQ(kind_of([&] { read_trajectory(path); }), ErrorKind::kInput);

  write_variant(bytes + "x");
  EXPECT_EQ(kind_of([&] { read_trajectory(path); }), ErrorKind::kInput);

  EXPECT_EQ(kind_of([&] { read_trajectory(temp_file("does_not_exist.bin")); }), ErrorKind::kNotFound);
}

TEST(KvCacheFile, RoundTrip) {
  Rng rng(8);
  KvCache cache;
  cache[{Pass::kCond, BlockId::kMid, 0}] = {random_tensor(rng, {4, 3}), random_tensor(rng, {4, 3})};
  cache[{Pass::kUncond, BlockId::kUp3, 12}] = {random_tensor(rng, {16, 2}), random_tensor(rng, {16, 2})};
  const auto path = temp_file("kv.bin");
  write_kv_cache(path, cache);
  const KvCache back = read_kv_cache(path);
  ASSERT_EQ(back.size(), cache.size());
  for (const auto& [key, entry] : cache) {
    ASSERT_TRUE(back.count(key));
    EXPECT_EQ(back.at(key).k.storage(), entry.k.storage());
    EXPECT_EQ(back.at(key).v.shape(), entry.v.shape());
    EXPECT_EQ(back.at(key).v.storage(), entry.v.storage());
  }
}

TEST(KvCacheFile, RejectsForeignFile) {
  Rng rng(1);
  const auto path = temp_file("not_kv.bin");
  write_trajectory(path, {random_tensor(rng, {1, 1, 1})});
  EXPECT_EQ(kind_of([&] { read_kv_cache(path); }), ErrorKind::kInput);
}

TEST(Checkpoint, RoundTripPreservesDimsAndValues) {
  ShaderDims small;
  small.channels = 4;
  small.capacity = 3;
  CheckpointEntries entries;
  entries.emplace("mid", ShaderParams<double>::random(3, small, 0.5));
  entries.emplace("up-1", ShaderParams<double>::random(4, ShaderDims{}, 0.5));
  entries.at("mid").gamma_merge[0] = 0.75;
  const auto path = temp_file("ckpt.bin");
  write_checkpoint(path, entries);
  const CheckpointEntries back = read_checkpoint(path);
  ASSERT_EQ(back.size(), 2u);
  for (const auto& [name, params] : entries) {
    ASSERT_TRUE(back.count(name)) << name;
    EXPECT_EQ(back.at(name).dims, params.dims);
    const auto a = flat_tensors(params), b = flat_tensors(back.at(name));
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].shape(), b[i].shape());
      EXPECT_EQ(a[i].storage(), b[i].storage());
    }
  }
  EXPECT_DOUBLE_EQ(back.at("mid").gamma(), 0.75);
}

TEST(Checkpoint, RejectsOtherFormats) {
  Rng rng(1);
  const auto path = temp_file("ckpt_bad.bin");
  write_trajectory(path, {random_tensor(rng, {1, 1, 1})});
  EXPECT_EQ(kind_of([&] { read_checkpoint(path); }), ErrorKind::kInput);
}
