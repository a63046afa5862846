#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "migc/consistency.hpp"
#include "migc/scene.hpp"
#include "migc/shading.hpp"

namespace migc {

/// Blocks of the toy U-Net that carry attention layers, in execution order.
enum class BlockId : std::uint8_t { kDown0, kDown1, kDown2, kMid, kUp1, kUp2, kUp3 };

inline constexpr std::array<BlockId, 7> kAllBlocks = {BlockId::kDown0, BlockId::kDown1, BlockId::kDown2,
                                                      BlockId::kMid,   BlockId::kUp1,   BlockId::kUp2,
                                                      BlockId::kUp3};

inline const char* block_name(BlockId b) {
  switch (b) {
    case BlockId::kDown0: return "down-0";
    case BlockId::kDown1: return "down-1";
    case BlockId::kDown2: return "down-2";
    case BlockId::kMid: return "mid";
    case BlockId::kUp1: return "up-1";
    case BlockId::kUp2: return "up-2";
    case BlockId::kUp3: return "up-3";
  }
  return "?";
}

inline BlockId parse_block(const std::string& name) {
  for (BlockId b : kAllBlocks)
    if (name == block_name(b)) return b;
  fail(ErrorKind::kConfig, "unknown block '" + name + "' (expected down-0..2, mid, up-1..3)");
}

/// Toy denoiser layout. Widths are given for the three down blocks; the mid
/// block reuses the deepest width and up blocks mirror the down blocks, so
/// up-1 sits at the same depth as down-2.
struct DenoiserConfig {
  std::size_t latent_channels = 4;
  std::array<std::size_t, 3> widths = {8, 16, 32};
  std::size_t heads = 2;
  std::size_t shader_heads = 1;
  std::size_t embed_dim = 16;
  std::size_t image_tokens = 4;
  std::size_t capacity = 10;
  std::size_t fourier_freqs = 8;
  std::size_t grounding_hidden = 32;
  std::size_t position_tokens = 1;
  std::uint64_t base_seed = 20240601;

  std::size_t channels(BlockId b) const {
    switch (b) {
      case BlockId::kDown0: case BlockId::kUp3: return widths[0];
      case BlockId::kDown1: case BlockId::kUp2: return widths[1];
      default: return widths[2];
    }
  }

  /// Downscale factor of a block relative to the latent.
  std::size_t stride(BlockId b) const {
    switch (b) {
      case BlockId::kDown0: case BlockId::kUp3: return 1;
      case BlockId::kDown1: case BlockId::kUp2: return 2;
      case BlockId::kDown2: case BlockId::kUp1: return 4;
      case BlockId::kMid: return 8;
    }
    return 1;
  }

  ShaderDims shader_dims(BlockId b) const {
    ShaderDims d;
    d.channels = channels(b);
    d.attn_dim = channels(b);
    d.embed_dim = embed_dim;
    d.heads = shader_heads;
    d.fourier_freqs = fourier_freqs;
    d.grounding_hidden = grounding_hidden;
    d.position_tokens = position_tokens;
    d.capacity = capacity;
    return d;
  }

  void check_resolution(std::size_t height, std::size_t width) const {
    require(height % 8 == 0 && width % 8 == 0 && height >= 8 && width >= 8, ErrorKind::kConfig,
            "latent resolution must be a positive multiple of 8, got " + std::to_string(height) + "x" +
                std::to_string(width));
  }
};

/// Where and when the shaders run.
struct DeploymentPlan {
  std::set<BlockId> instance_shader_blocks = {BlockId::kMid, BlockId::kUp1};
  std::set<BlockId> refined_shader_blocks = {kAllBlocks.begin(), kAllBlocks.end()};
  double control_fraction = 0.5;
  double alpha = 1.0;
  double beta = 0.0;

  void validate() const {
    require(control_fraction > 0.0 && control_fraction <= 1.0, ErrorKind::kConfig,
            "control fraction must lie in (0, 1]");
  }
};

/// The Instance Shader runs on `block` at `step` iff the block is in the plan
/// and step/total is strictly below the control fraction.
inline bool shader_active(BlockId block, std::size_t step, std::size_t total_steps, const DeploymentPlan& plan) {
  require(step < total_steps, ErrorKind::kInvalidArgument, "step index beyond schedule");
  if (!plan.instance_shader_blocks.count(block)) return false;
  return static_cast<double>(step) / static_cast<double>(total_steps) < plan.control_fraction;
}

/// Noise levels for an Euler sampler: `sigmas` has one entry per step and
/// is followed by an implicit terminal sigma of 0.
struct SamplerSchedule {
  std::size_t steps = 50;
  std::vector<double> sigmas;
  double cfg_scale = 7.5;
  std::uint64_t seed = 0;

  /// Linear ramp from sigma_max down to sigma_min.
  static SamplerSchedule linear(std::size_t steps, double sigma_max = 10.0, double sigma_min = 0.05,
                                double cfg_scale = 7.5, std::uint64_t seed = 0) {
    require(steps >= 1, ErrorKind::kConfig, "need at least one sampling step");
    SamplerSchedule s;
    s.steps = steps;
    s.cfg_scale = cfg_scale;
    s.seed = seed;
    for (std::size_t i = 0; i < steps; ++i) {
      const double f = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
      s.sigmas.push_back(sigma_max + (sigma_min - sigma_max) * f);
    }
    return s;
  }

  void validate() const {
    require(steps >= 1 && sigmas.size() == steps, ErrorKind::kConfig, "sigma sequence length must equal steps");
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
      require(std::isfinite(sigmas[i]) && sigmas[i] > 0.0, ErrorKind::kConfig, "sigmas must be positive");
      if (i) require(sigmas[i] < sigmas[i - 1], ErrorKind::kConfig, "sigmas must be strictly decreasing");
    }
  }

  double sigma(std::size_t i) const { return i < sigmas.size() ? sigmas[i] : 0.0; }

  friend bool operator==(const SamplerSchedule&, const SamplerSchedule&) = default;
};

/// eps_uncond + scale * (eps_cond - eps_uncond).
inline Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double scale) {
  require_same_shape(eps_cond.shape(), eps_uncond.shape(), "cfg_combine");
  Tensor out(eps_cond.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_uncond[i] + scale * (eps_cond[i] - eps_uncond[i]);
  return out;
}

struct LatentState {
  Tensor z;
  std::size_t t_index = 0;
};

enum class Pass : std::uint8_t { kCond = 0, kUncond = 1 };

struct KvKey {
  Pass pass = Pass::kCond;
  BlockId block = BlockId::kDown0;
  std::uint32_t step = 0;
  friend auto operator<=>(const KvKey&, const KvKey&) = default;
};

/// Self-attention keys/values per (pass, block, step) of one sampling run.
using KvCache = std::map<KvKey, KvEntry>;

struct DenoiseStats {
  std::map<BlockId, std::size_t> instance_shader_calls;
  std::map<BlockId, std::size_t> refined_shader_calls;
};

struct DenoiseContext {
  std::size_t step = 0;
  std::size_t total_steps = 1;
  Pass pass = Pass::kCond;
  KvCache* record = nullptr;          // receives this call's K/V
  const KvCache* previous = nullptr;  // concatenated into self-attention
  DenoiseStats* stats = nullptr;
};

/// Per-block trainable Instance Shader parameters.
using ShaderSet = std::map<BlockId, ShaderParams<double>>;

inline ShaderSet random_shaders(const DenoiserConfig& cfg, std::uint64_t seed, double stddev = 0.02) {
  ShaderSet set;
  for (BlockId b : kAllBlocks)
    set.emplace(b, ShaderParams<double>::random(seed * 131 + static_cast<std::uint64_t>(b) + 1, cfg.shader_dims(b), stddev));
  return set;
}

/// Scene resolved against the encoders once per sampling run.
struct PreparedScene {
  Tensor global_embedding;
  std::vector<ShadingInstance> instances;
  std::size_t height = 0, width = 0;
};

inline PreparedScene prepare_scene(const SceneSpec& scene, const EncoderContext& ctx) {
  PreparedScene p;
  auto tokens = tokenize(scene.global_text);
  if (tokens.empty()) tokens.push_back(kNullToken);
  p.global_embedding = encode_text(tokens, ctx.embed_dim);
  for (const auto& inst : scene.instances) p.instances.push_back(prepare_instance(inst, ctx));
  p.height = scene.height;
  p.width = scene.width;
  return p;
}

/// Frozen toy U-Net. Every block is: resample, 1x1 projection + SiLU, noise
/// embedding, skip connection (up blocks), self-attention, conditioning, each
/// attention result added residually. The prediction is c_in * z plus a
/// small head on the last feature, so an Euler run contracts the noise.
class ToyDenoiser {
 public:
  struct Block {
    Linear<double> in_proj;
    Tensor noise_embed;
    SelfAttentionParams<double> self_attn;
    CrossAttentionParams<double> cross_attn;
  };

  explicit ToyDenoiser(DenoiserConfig cfg) : cfg_(std::move(cfg)) {
    Rng rng(cfg_.base_seed);
    std::size_t prev = cfg_.latent_channels;
    for (BlockId b : kAllBlocks) {
      const std::size_t c = cfg_.channels(b);
      Block blk;
      blk.in_proj = Linear<double>::random(rng, prev, c, 1.0 / std::sqrt(static_cast<double>(prev)));
      blk.noise_embed = Tensor({c});
      for (auto& x : blk.noise_embed.storage()) x = rng.normal(0.0, 0.5);
      const double s = 1.0 / std::sqrt(static_cast<double>(c));
      blk.self_attn = SelfAttentionParams<double>::random(rng, c, s);
      blk.cross_attn = CrossAttentionParams<double>::random(rng, c, c, cfg_.embed_dim, 1.0 / std::sqrt(static_cast<double>(cfg_.embed_dim)));
      blocks_.emplace(b, std::move(blk));
      prev = c;
    }
    out_proj_ = Linear<double>::random(rng, prev, cfg_.latent_channels, 0.1 / std::sqrt(static_cast<double>(prev)));
  }

  const DenoiserConfig& config() const { return cfg_; }
  const Block& block(BlockId b) const { return blocks_.at(b); }

  /// Noise prediction for latent z (H x W x latent_channels) at noise level sigma.
  Tensor denoise(const Tensor& z, double sigma, const PreparedScene& scene, const DeploymentPlan& plan,
                 const ShaderSet& shaders, const DenoiseContext& ctx) const {
    require(z.rank() == 3 && z.dim(2) == cfg_.latent_channels, ErrorKind::kShape,
            "latent must be H x W x " + std::to_string(cfg_.latent_channels));
    cfg_.check_resolution(z.dim(0), z.dim(1));
    require(scene.instances.size() + 1 <= cfg_.capacity, ErrorKind::kCapacity,
            std::to_string(scene.instances.size()) + " instances exceed capacity " + std::to_string(cfg_.capacity));
    const double c_in = 1.0 / std::sqrt(sigma * sigma + 1.0);
    const double c_noise = std::log(sigma) / 4.0;

    Tensor x = scaled(z, c_in);
    std::map<BlockId, Tensor> skips;
    for (BlockId b : kAllBlocks) {
      if (b == BlockId::kDown1 || b == BlockId::kDown2 || b == BlockId::kMid) x = avg_pool2(x);
      if (b == BlockId::kUp1 || b == BlockId::kUp2 || b == BlockId::kUp3) x = upsample2(x);
      const Block& blk = blocks_.at(b);
      x = blk.in_proj(x);
      for (auto& v : x.storage()) v = silu(v);
      add_channel_vector(x, blk.noise_embed, c_noise);
      if (b == BlockId::kUp1) x = x + skips.at(BlockId::kDown2);
      if (b == BlockId::kUp2) x = x + skips.at(BlockId::kDown1);
      if (b == BlockId::kUp3) x = x + skips.at(BlockId::kDown0);
      x = attend(b, x, scene, plan, shaders, ctx);
      if (b == BlockId::kDown0 || b == BlockId::kDown1 || b == BlockId::kDown2) skips[b] = x;
    }
    Tensor eps = out_proj_(x);
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] += c_in * z[i];
    require_finite(eps, "denoise");
    return eps;
  }

 private:
  static Tensor avg_pool2(const Tensor& x) {
    const std::size_t h = x.dim(0) / 2, w = x.dim(1) / 2, c = x.dim(2);
    Tensor out({h, w, c});
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t q = 0; q < w; ++q)
        for (std::size_t k = 0; k < c; ++k)
          out.at(r, q, k) = 0.25 * (x.at(2 * r, 2 * q, k) + x.at(2 * r + 1, 2 * q, k) + x.at(2 * r, 2 * q + 1, k) +
                                    x.at(2 * r + 1, 2 * q + 1, k));
    return out;
  }

  static Tensor upsample2(const Tensor& x) {
    const std::size_t h = x.dim(0) * 2, w = x.dim(1) * 2, c = x.dim(2);
    Tensor out({h, w, c});
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t q = 0; q < w; ++q)
        for (std::size_t k = 0; k < c; ++k) out.at(r, q, k) = x.at(r / 2, q / 2, k);
    return out;
  }

  static void add_channel_vector(Tensor& x, const Tensor& v, double scale) {
    const std::size_t c = x.last();
    for (std::size_t t = 0; t < x.rows(); ++t)
      for (std::size_t k = 0; k < c; ++k) x[t * c + k] += scale * v[k];
  }

  Tensor attend(BlockId b, const Tensor& x, const PreparedScene& scene, const DeploymentPlan& plan,
                const ShaderSet& shaders, const DenoiseContext& ctx) const {
    const Block& blk = blocks_.at(b);
    const KvKey key{ctx.pass, b, static_cast<std::uint32_t>(ctx.step)};
    std::optional<KvEntry> prev;
    if (ctx.previous) {
      auto it = ctx.previous->find(key);
      if (it != ctx.previous->end()) prev = it->second;
    }
    KvEntry current;
    Tensor h = x + kv_concat_self_attention(x, prev, blk.self_attn, cfg_.heads, ctx.record ? &current : nullptr);
    if (ctx.record) (*ctx.record)[key] = std::move(current);
    return h + conditioning(b, h, scene, plan, shaders, ctx);
  }

  Tensor conditioning(BlockId b, const Tensor& x, const PreparedScene& scene, const DeploymentPlan& plan,
                      const ShaderSet& shaders, const DenoiseContext& ctx) const {
    const Block& blk = blocks_.at(b);
    const bool has_instances = !scene.instances.empty();
    const bool instance = has_instances && shader_active(b, ctx.step, ctx.total_steps, plan);
    const bool refined = plan.refined_shader_blocks.count(b) != 0;

    std::optional<Tensor> r_inst, r_ref;
    if (instance) {
      auto it = shaders.find(b);
      require(it != shaders.end(), ErrorKind::kConfig, std::string("no shader parameters for block ") + block_name(b));
      r_inst = instance_shader(x, scene.instances, it->second).output;
      if (ctx.stats) ++ctx.stats->instance_shader_calls[b];
    }
    if (refined) {
      r_ref = refined_shader(x, scene.global_embedding, scene.instances, blk.cross_attn, plan.alpha, plan.beta,
                             cfg_.heads)
                  .output;
      if (ctx.stats) ++ctx.stats->refined_shader_calls[b];
    }
    if (r_inst && r_ref) return merge_shaders(*r_inst, *r_ref, shaders.at(b).gamma());
    if (r_inst) return *r_inst;
    if (r_ref) return *r_ref;
    return refined_instance_shading(x, scene.global_embedding, Modality::kText, blk.cross_attn, cfg_.heads);
  }

  DenoiserConfig cfg_;
  std::map<BlockId, Block> blocks_;
  Linear<double> out_proj_;
};

/// Deterministic initial latent: sigma_0 times standard normal noise from the seed.
inline Tensor initial_latent(std::size_t height, std::size_t width, std::size_t channels, const SamplerSchedule& s) {
  Rng rng(s.seed);
  Tensor z({height, width, channels});
  for (auto& v : z.storage()) v = s.sigmas.front() * rng.normal();
  return z;
}

using EpsilonFn = std::function<Tensor(const Tensor& z, double sigma, std::size_t step)>;
using StepHook = std::function<void(std::size_t index, Tensor& z)>;

/// Euler sampler: z_{i+1} = z_i + (sigma_{i+1} - sigma_i) * eps_i, with the
/// terminal sigma 0. `after_step(i, z)` sees every trajectory entry (index 0 is
/// the initial latent) and may rewrite it. Returns all steps+1 latents.
inline std::vector<Tensor> euler_sample(const EpsilonFn& eps, const SamplerSchedule& schedule, Tensor z,
                                        const StepHook& after_step = {}) {
  schedule.validate();
  std::vector<Tensor> trajectory;
  trajectory.reserve(schedule.steps + 1);
  if (after_step) after_step(0, z);
  trajectory.push_back(z);
  for (std::size_t i = 0; i < schedule.steps; ++i) {
    const Tensor d = eps(z, schedule.sigma(i), i);
    require_same_shape(d.shape(), z.shape(), "noise prediction");
    const double dt = schedule.sigma(i + 1) - schedule.sigma(i);
    for (std::size_t k = 0; k < z.size(); ++k) z[k] += dt * d[k];
    require_finite(z, "sampler step");
    if (after_step) after_step(i + 1, z);
    trajectory.push_back(z);
  }
  return trajectory;
}

struct SampleOptions {
  const KvCache* previous_kv = nullptr;
  bool record_kv = false;
  StepHook after_step;
};

struct SampleResult {
  std::vector<Tensor> trajectory;
  KvCache kv;
  DenoiseStats stats;

  const Tensor& final_latent() const { return trajectory.back(); }
};

/// Full sampling run with classifier-free guidance.
inline SampleResult sample(const ToyDenoiser& model, const SceneSpec& scene, const SamplerSchedule& schedule,
                           const DeploymentPlan& plan, const ShaderSet& shaders, const EncoderContext& encoders,
                           const SampleOptions& options = {}) {
  plan.validate();
  schedule.validate();
  model.config().check_resolution(scene.height, scene.width);
  scene.check_capacity(model.config().capacity);
  const PreparedScene cond = prepare_scene(scene, encoders);
  const PreparedScene uncond = prepare_scene(scene.null_like(), encoders);

  SampleResult res;
  DenoiseContext ctx;
  ctx.total_steps = schedule.steps;
  ctx.previous = options.previous_kv;
  ctx.record = options.record_kv ? &res.kv : nullptr;
  ctx.stats = &res.stats;
  auto eps = [&](const Tensor& z, double sigma, std::size_t step) {
    ctx.step = step;
    ctx.pass = Pass::kCond;
    const Tensor e_c = model.denoise(z, sigma, cond, plan, shaders, ctx);
    ctx.pass = Pass::kUncond;
    const Tensor e_u = model.denoise(z, sigma, uncond, plan, shaders, ctx);
    return cfg_combine(e_c, e_u, schedule.cfg_scale);
  };
  res.trajectory = euler_sample(
      eps, schedule, initial_latent(scene.height, scene.width, model.config().latent_channels, schedule),
      options.after_step);
  return res;
}

}  // namespace migc
