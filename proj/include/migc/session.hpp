#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "migc/consistency.hpp"
#include "migc/diffusion.hpp"
#include "migc/io.hpp"
#include "migc/json_io.hpp"
#include "migc/scene.hpp"

namespace migc {

inline constexpr int kManifestSchemaVersion = 1;

/// Everything besides the scene that determines a sampling run.
struct RunConfig {
  DenoiserConfig denoiser;
  DeploymentPlan plan;
  std::size_t steps = 50;
  double sigma_max = 10.0;
  double sigma_min = 0.05;
  double cfg_scale = 7.5;
  double gamma_loss = 0.1;
  std::uint64_t shader_seed = 7;
  std::string checkpoint;  // empty: seeded random shader init

  SamplerSchedule schedule(std::uint64_t seed) const {
    return SamplerSchedule::linear(steps, sigma_max, sigma_min, cfg_scale, seed);
  }
};

inline Json block_set_to_json(const std::set<BlockId>& blocks) {
  Json out = Json::array();
  for (BlockId b : blocks) out.push_back(block_name(b));
  return out;
}

inline std::set<BlockId> parse_block_set(const JsonNode& node) {
  std::set<BlockId> out;
  for (const auto& item : node.items()) {
    try {
      out.insert(parse_block(item.as_string()));
    } catch (const Error& e) {
      item.error(e.what());
    }
  }
  return out;
}

inline Json run_config_to_json(const RunConfig& c) {
  return Json{{"steps", c.steps},
              {"sigma_max", c.sigma_max},
              {"sigma_min", c.sigma_min},
              {"cfg_scale", c.cfg_scale},
              {"gamma_loss", c.gamma_loss},
              {"shader_seed", c.shader_seed},
              {"checkpoint", c.checkpoint},
              {"capacity", c.denoiser.capacity},
              {"plan",
               {{"instance_shader_blocks", block_set_to_json(c.plan.instance_shader_blocks)},
                {"refined_shader_blocks", block_set_to_json(c.plan.refined_shader_blocks)},
                {"control_fraction", c.plan.control_fraction},
                {"alpha", c.plan.alpha},
                {"beta", c.plan.beta}}}};
}

inline RunConfig parse_run_config(const JsonNode& node) {
  node.expect_object({"steps", "sigma_max", "sigma_min", "cfg_scale", "gamma_loss", "shader_seed", "checkpoint",
                      "capacity", "plan"});
  RunConfig c;
  c.steps = node.at("steps").as_uint();
  c.sigma_max = node.at("sigma_max").as_number();
  c.sigma_min = node.at("sigma_min").as_number();
  c.cfg_scale = node.at("cfg_scale").as_number();
  c.gamma_loss = node.at("gamma_loss").as_number();
  c.shader_seed = node.at("shader_seed").as_uint();
  c.checkpoint = node.at("checkpoint").as_string();
  c.denoiser.capacity = node.at("capacity").as_uint();
  const JsonNode plan = node.at("plan");
  plan.expect_object({"instance_shader_blocks", "refined_shader_blocks", "control_fraction", "alpha", "beta"});
  c.plan.instance_shader_blocks = parse_block_set(plan.at("instance_shader_blocks"));
  c.plan.refined_shader_blocks = parse_block_set(plan.at("refined_shader_blocks"));
  c.plan.control_fraction = plan.at("control_fraction").as_number();
  c.plan.alpha = plan.at("alpha").as_number();
  c.plan.beta = plan.at("beta").as_number();
  return c;
}

/// Random per-block shaders, overridden by any block entries in the checkpoint.
inline ShaderSet load_shaders(const RunConfig& cfg) {
  ShaderSet set = random_shaders(cfg.denoiser, cfg.shader_seed);
  if (cfg.checkpoint.empty()) return set;
  CheckpointEntries entries = read_checkpoint(cfg.checkpoint);
  for (BlockId b : kAllBlocks) {
    auto it = entries.find(block_name(b));
    if (it == entries.end()) continue;
    require(it->second.dims == cfg.denoiser.shader_dims(b), ErrorKind::kConfig,
            "checkpoint entry '" + it->first + "' does not match the denoiser's shader dims for that block");
    set.at(b) = std::move(it->second);
  }
  return set;
}

inline EncoderContext make_encoders(const RunConfig& cfg, const SceneSpec& scene) {
  EncoderContext ctx;
  ctx.embed_dim = cfg.denoiser.embed_dim;
  ctx.image_tokens = cfg.denoiser.image_tokens;
  Rng rng(cfg.denoiser.base_seed ^ 0x9e3779b97f4a7c15ULL);
  ctx.projector = ImageProjector::random(rng, cfg.denoiser.embed_dim, cfg.denoiser.embed_dim, 0.1);
  load_reference_images(scene, ctx.images);
  return ctx;
}

struct RunOutput {
  SampleResult result;
  SamplerSchedule schedule;
  std::size_t modified_pixels = 0;
  std::size_t iteration = 0;
};

struct SessionState {
  SceneSpec scene;
  RunConfig config;
  SamplerSchedule schedule;
  std::vector<Tensor> trajectory;
  KvCache kv;
  std::size_t iteration = 0;
};

inline Json manifest_json(const std::string& command, const RunConfig& cfg, const SceneSpec& scene,
                          const RunOutput& out) {
  Json calls = Json::object();
  for (const auto& [b, n] : out.result.stats.instance_shader_calls) calls[block_name(b)] = n;
  const Tensor& z = out.result.final_latent();
  return Json{{"version", kManifestSchemaVersion},
              {"command", command},
              {"iteration", out.iteration},
              {"seed", scene.seed},
              {"config", run_config_to_json(cfg)},
              {"sigmas", out.schedule.sigmas},
              {"latent_shape", {z.dim(0), z.dim(1), z.dim(2)}},
              {"trajectory", "trajectory.bin"},
              {"kv_cache", "kv_cache.bin"},
              {"scene", "scene.json"},
              {"instance_shader_calls", calls},
              {"modified_pixels", out.modified_pixels}};
}

/// Writes scene, trajectory, KV cache and manifest into `dir`. The stored
/// scene keeps absolute reference-image paths so the session is relocatable
/// relative to the caller's working directory.
inline void save_session(const std::filesystem::path& dir, const std::string& command, const RunConfig& cfg,
                         const SceneSpec& scene, const RunOutput& out) {
  std::filesystem::create_directories(dir);
  SceneSpec stored = scene;
  for (auto& [id, path] : stored.reference_images) path = std::filesystem::absolute(path).lexically_normal().string();
  write_json_file(dir / "scene.json", scene_to_json(stored));
  write_trajectory(dir / "trajectory.bin", out.result.trajectory);
  write_kv_cache(dir / "kv_cache.bin", out.result.kv);
  write_json_file(dir / "manifest.json", manifest_json(command, cfg, scene, out));
}

inline SessionState load_session(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), ErrorKind::kMissingState, "session directory " + dir.string() + " not found");
  for (const char* f : {"manifest.json", "scene.json", "trajectory.bin", "kv_cache.bin"})
    require(std::filesystem::exists(dir / f), ErrorKind::kMissingState, "session is missing " + (dir / f).string());
  SessionState s;
  const Json manifest = read_json_file(dir / "manifest.json");
  const JsonNode root(manifest, "");
  root.expect_version(kManifestSchemaVersion);
  s.config = parse_run_config(root.at("config"));
  s.iteration = root.at("iteration").as_uint();
  s.scene = load_scene(dir / "scene.json");
  s.schedule = s.config.schedule(s.scene.seed);
  s.trajectory = read_trajectory(dir / "trajectory.bin");
  s.kv = read_kv_cache(dir / "kv_cache.bin");
  require(s.trajectory.size() == s.schedule.steps + 1, ErrorKind::kMissingState,
          "session trajectory length does not match its manifest");
  return s;
}

/// First iteration: plain sampling with K/V recording.
inline RunOutput run_generate(const SceneSpec& scene, const RunConfig& cfg) {
  const ToyDenoiser model(cfg.denoiser);
  const ShaderSet shaders = load_shaders(cfg);
  const EncoderContext enc = make_encoders(cfg, scene);
  RunOutput out;
  out.schedule = cfg.schedule(scene.seed);
  SampleOptions opt;
  opt.record_kv = true;
  out.result = sample(model, scene, out.schedule, cfg.plan, shaders, enc, opt);
  return out;
}

/// Later iteration: sampling with the previous K/V concatenated into every
/// self-attention and the latent outside the modify mask replaced by the
/// previous trajectory after every step.
inline RunOutput run_edit(const SessionState& prev, const SceneSpec& scene, const RunConfig& cfg) {
  const SamplerSchedule schedule = cfg.schedule(scene.seed);
  require(schedule == prev.schedule, ErrorKind::kConfig,
          "sampler schedule (steps, sigmas, cfg scale, seed) differs from the previous iteration");
  require(scene.height == prev.scene.height && scene.width == prev.scene.width, ErrorKind::kConfig,
          "scene resolution differs from the previous iteration");
  require(prev.trajectory.size() == schedule.steps + 1, ErrorKind::kConfig,
          "previous trajectory length does not match the schedule");

  const ToyDenoiser model(cfg.denoiser);
  const ShaderSet shaders = load_shaders(cfg);
  const EncoderContext enc = make_encoders(cfg, scene);
  const PositionMap modify = modify_mask(prev.scene, scene, scene.height, scene.width);

  RunOutput out;
  out.schedule = schedule;
  out.modified_pixels = modify.count();
  out.iteration = prev.iteration + 1;
  SampleOptions opt;
  opt.record_kv = true;
  opt.previous_kv = &prev.kv;
  opt.after_step = [&](std::size_t i, Tensor& z) { z = blend_latents(z, prev.trajectory[i], modify); };
  out.result = sample(model, scene, schedule, cfg.plan, shaders, enc, opt);
  return out;
}

}  // namespace migc
