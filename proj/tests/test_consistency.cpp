#include <gtest/gtest.h>

#include <filesystem>

#include "migc/session.hpp"
#include "oracles.hpp"

using namespace migc;

namespace {

SceneSpec base_scene() {
  SceneSpec s;
  s.global_text = "a red dog and a blue cat";
  s.height = s.width = 16;
  s.seed = 5;
  s.instances.push_back({"dog", TextAttribute{{"red", "dog"}}, Box{0, 0, 0.5, 0.5}});
  s.instances.push_back({"cat", TextAttribute{{"blue", "cat"}}, Box{0.5, 0.5, 1, 1}});
  return s;
}

RunConfig small_config() {
  RunConfig c;
  c.steps = 4;
  c.shader_seed = 9;
  return c;
}

SessionState as_state(const SceneSpec& scene, const RunConfig& cfg, const RunOutput& out) {
  return {scene, cfg, out.schedule, out.result.trajectory, out.result.kv, out.iteration};
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("migc_consistency_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(ModifyMask, IdenticalScenesGiveEmptyMask) {
  EXPECT_TRUE(modify_mask(base_scene(), base_scene(), 16, 16).empty());
}

TEST(ModifyMask, AttributeChangeCoversInstanceBox) {
  SceneSpec cur = base_scene();
  cur.instances[0].attribute = TextAttribute{{"green", "dog"}};
  EXPECT_EQ(modify_mask(base_scene(), cur, 16, 16), rasterize_box({0, 0, 0.5, 0.5}, 16, 16));
}

TEST(ModifyMask, MoveCoversOldAndNewFootprint) {
  SceneSpec cur = base_scene();
  cur.instances[0].position = Box{0.25, 0, 0.75, 0.5};
  const PositionMap m = modify_mask(base_scene(), cur, 16, 16);
  const PositionMap a = rasterize_box({0, 0, 0.5, 0.5}, 16, 16), b = rasterize_box({0.25, 0, 0.75, 0.5}, 16, 16);
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_EQ(m[i], a[i] || b[i]);
  EXPECT_EQ(m.count(), 96u);
}

TEST(ModifyMask, AddAndRemove) {
  SceneSpec added = base_scene();
  added.instances.push_back({"bird", TextAttribute{{"bird"}}, Box{0.5, 0, 1, 0.25}});
  EXPECT_EQ(modify_mask(base_scene(), added, 16, 16), rasterize_box({0.5, 0, 1, 0.25}, 16, 16));
  EXPECT_EQ(modify_mask(added, base_scene(), 16, 16), rasterize_box({0.5, 0, 1, 0.25}, 16, 16));
}

TEST(ModifyMask, RenamedIdCountsAsRemoveAndAdd) {
  SceneSpec cur = base_scene();
  cur.instances[1].id = "kitten";
  EXPECT_EQ(modify_mask(base_scene(), cur, 16, 16), rasterize_box({0.5, 0.5, 1, 1}, 16, 16));
}

TEST(ModifyMask, MaskPositionsAreUsedDirectly) {
  SceneSpec prev = base_scene(), cur = base_scene();
  PositionMap m(16, 16);
  m.set(3, 4, true);
  m.set(9, 1, true);
  prev.instances[0].position = m;
  cur.instances[0].position = m;
  cur.instances[0].attribute = TextAttribute{{"gray", "dog"}};
  EXPECT_EQ(modify_mask(prev, cur, 16, 16), m);
}

TEST(Blend, SelectsPerPixel) {
  Rng rng(1);
  const Tensor cur = oracle::random_tensor(rng, {2, 3, 2}), prev = oracle::random_tensor(rng, {2, 3, 2});
  EXPECT_EQ(blend_latents(cur, prev, PositionMap(2, 3)), prev);
  EXPECT_EQ(blend_latents(cur, prev, PositionMap(2, 3, true)), cur);
  const PositionMap m = PositionMap::from_cells(2, 3, {1, 0, 0, 0, 1, 0});
  const Tensor out = blend_latents(cur, prev, m);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(out[t * 2 + c], m[t] ? cur[t * 2 + c] : prev[t * 2 + c]);
  EXPECT_THROW(blend_latents(cur, prev, PositionMap(3, 2)), Error);
  EXPECT_THROW(blend_latents(cur, Tensor({2, 3, 1}), m), Error);
}

TEST(KvConcat, WithoutCacheIsPlainSelfAttention) {
  Rng rng(2);
  const auto p = SelfAttentionParams<double>::random(rng, 4, 0.5);
  const Tensor x = oracle::random_tensor(rng, {2, 2, 4});
  const Tensor t = x.reshaped({4, 4});
  const Tensor q = oracle::matmul(t, p.q.weight), k = oracle::matmul(t, p.k.weight), v = oracle::matmul(t, p.v.weight);
  const Tensor ref = oracle::matmul(oracle::attention(q, k, v, nullptr, 2), p.out.weight);
  KvEntry cur;
  const Tensor got = kv_concat_self_attention(x, std::nullopt, p, 2, &cur);
  EXPECT_LE(oracle::max_abs_diff(got.reshaped({4, 4}), ref), 1e-12);
  EXPECT_LE(oracle::max_abs_diff(cur.k, k), 1e-12);
  EXPECT_LE(oracle::max_abs_diff(cur.v, v), 1e-12);
}

TEST(KvConcat, DuplicatedOwnCacheLeavesOutputUnchanged) {
  Rng rng(3);
  const auto p = SelfAttentionParams<double>::random(rng, 4, 0.5);
  const Tensor x = oracle::random_tensor(rng, {2, 2, 4});
  KvEntry cur;
  const Tensor plain = kv_concat_self_attention(x, std::nullopt, p, 1, &cur);
  EXPECT_LE(oracle::max_abs_diff(kv_concat_self_attention(x, cur, p, 1), plain), 1e-12);
}

TEST(KvConcat, TwoTokenBruteForce) {
  Rng rng(4);
  const auto p = SelfAttentionParams<double>::random(rng, 2, 0.7);
  const Tensor x = oracle::random_tensor(rng, {1, 2, 2});
  const KvEntry prev{oracle::random_tensor(rng, {3, 2}), oracle::random_tensor(rng, {3, 2})};
  const Tensor t = x.reshaped({2, 2});
  const Tensor q = oracle::matmul(t, p.q.weight), k = oracle::matmul(t, p.k.weight), v = oracle::matmul(t, p.v.weight);
  Tensor kk({5, 2}), vv({5, 2});
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 2; ++c) {
      kk.at(r, c) = r < 2 ? k.at(r, c) : prev.k.at(r - 2, c);
      vv.at(r, c) = r < 2 ? v.at(r, c) : prev.v.at(r - 2, c);
    }
  const Tensor ref = oracle::matmul(oracle::attention(q, kk, vv, nullptr, 1), p.out.weight);
  EXPECT_LE(oracle::max_abs_diff(kv_concat_self_attention(x, prev, p).reshaped({2, 2}), ref), 1e-12);
}

TEST(KvConcat, WidthMismatchIsShapeError) {
  Rng rng(5);
  const auto p = SelfAttentionParams<double>::random(rng, 4, 0.5);
  const KvEntry bad{Tensor({3, 2}), Tensor({3, 2})};
  try {
    kv_concat_self_attention(Tensor({2, 2, 4}), bad, p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kShape);
  }
}

TEST(Editing, IdenticalSceneReproducesTrajectory) {
  const RunConfig cfg = small_config();
  const SceneSpec scene = base_scene();
  const RunOutput first = run_generate(scene, cfg);
  const RunOutput second = run_edit(as_state(scene, cfg, first), scene, cfg);
  EXPECT_EQ(second.modified_pixels, 0u);
  EXPECT_EQ(second.iteration, 1u);
  ASSERT_EQ(second.result.trajectory.size(), first.result.trajectory.size());
  for (std::size_t i = 0; i < first.result.trajectory.size(); ++i)
    EXPECT_EQ(second.result.trajectory[i], first.result.trajectory[i]);
}

TEST(Editing, UnmodifiedPixelsMatchEveryStep) {
  const RunConfig cfg = small_config();
  const SceneSpec scene = base_scene();
  const RunOutput first = run_generate(scene, cfg);
  SceneSpec cur = scene;
  cur.instances[1].attribute = TextAttribute{{"yellow", "cat"}};
  const RunOutput second = run_edit(as_state(scene, cfg, first), cur, cfg);
  const PositionMap m = modify_mask(scene, cur, 16, 16);
  EXPECT_EQ(second.modified_pixels, m.count());
  std::size_t changed = 0;
  for (std::size_t i = 0; i < first.result.trajectory.size(); ++i) {
    const Tensor &a = first.result.trajectory[i], &b = second.result.trajectory[i];
    for (std::size_t t = 0; t < 256; ++t)
      for (std::size_t c = 0; c < 4; ++c) {
        if (!m[t]) EXPECT_EQ(a[t * 4 + c], b[t * 4 + c]);
        changed += a[t * 4 + c] != b[t * 4 + c];
      }
  }
  EXPECT_GT(changed, 0u);
}

TEST(Editing, ScheduleOrResolutionMismatchIsConfigError) {
  const RunConfig cfg = small_config();
  const SceneSpec scene = base_scene();
  const SessionState state = as_state(scene, cfg, run_generate(scene, cfg));
  RunConfig other = cfg;
  other.steps = 5;
  SceneSpec reseeded = scene;
  reseeded.seed = 6;
  SceneSpec bigger = scene;
  bigger.height = 24;
  for (auto run : {std::function<void()>([&] { run_edit(state, scene, other); }),
                   std::function<void()>([&] { run_edit(state, reseeded, cfg); }),
                   std::function<void()>([&] { run_edit(state, bigger, cfg); })}) {
    try {
      run();
      ADD_FAILURE();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kConfig);
    }
  }
}

TEST(Session, SaveLoadRoundTrip) {
  const auto dir = temp_dir("roundtrip");
  const RunConfig cfg = small_config();
  const SceneSpec scene = base_scene();
  const RunOutput out = run_generate(scene, cfg);
  save_session(dir, "generate", cfg, scene, out);
  const SessionState s = load_session(dir);
  EXPECT_EQ(s.scene.instances, scene.instances);
  EXPECT_EQ(s.schedule, out.schedule);
  EXPECT_EQ(s.trajectory, out.result.trajectory);
  EXPECT_EQ(s.kv.size(), out.result.kv.size());
  for (const auto& [key, entry] : out.result.kv) {
    EXPECT_EQ(s.kv.at(key).k, entry.k);
    EXPECT_EQ(s.kv.at(key).v, entry.v);
  }
  std::filesystem::remove_all(dir);
}

TEST(Session, MissingStateIsReported) {
  const auto dir = temp_dir("missing");
  try {
    load_session(dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kMissingState);
  }
  const RunConfig cfg = small_config();
  save_session(dir, "generate", cfg, base_scene(), run_generate(base_scene(), cfg));
  std::filesystem::remove(dir / "kv_cache.bin");
  try {
    load_session(dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kMissingState);
  }
  std::filesystem::remove_all(dir);
}
