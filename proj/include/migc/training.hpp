#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "migc/dual.hpp"
#include "migc/io.hpp"
#include "migc/shading.hpp"

namespace migc {

template <class T = double>
struct LossBreakdown {
  T l_ldm{0.0};
  T l_ihbt{0.0};
  T total{0.0};
  double gamma_loss = 0.1;
};

/// Mean squared error between the true and predicted noise.
template <class T>
T denoising_loss(const BasicTensor<T>& eps_true, const BasicTensor<T>& eps_pred) {
  require_same_shape(eps_true.shape(), eps_pred.shape(), "denoising_loss");
  T acc(0.0);
  for (std::size_t i = 0; i < eps_true.size(); ++i) {
    const T e = eps_true[i] - eps_pred[i];
    acc += e * e;
  }
  return acc / static_cast<double>(eps_true.size());
}

/// Sum over instances and background pixels of |A_i - mean_bg(A_i)|. Zero when
/// the background is empty.
template <class T>
T inhibition_loss(const std::vector<BasicTensor<T>>& maps, const PositionMap& bg) {
  using std::abs;
  const std::size_t count = bg.count();
  for (const auto& a : maps)
    require(a.rank() == 2 && a.dim(0) == bg.height() && a.dim(1) == bg.width(), ErrorKind::kShape,
            "attention map " + shape_string(a.shape()) + " does not match the background mask");
  T loss(0.0);
  if (count == 0) return loss;
  for (const auto& a : maps) {
    T mean(0.0);
    for (std::size_t t = 0; t < bg.size(); ++t)
      if (bg[t]) mean += a[t];
    mean = mean / static_cast<double>(count);
    for (std::size_t t = 0; t < bg.size(); ++t)
      if (bg[t]) loss += abs(a[t] - mean);
  }
  return loss;
}

template <class T>
LossBreakdown<T> total_loss(const T& l_ldm, const T& l_ihbt, double gamma_loss = 0.1) {
  require(value_of(l_ldm) >= 0.0 && value_of(l_ihbt) >= 0.0 && gamma_loss >= 0.0, ErrorKind::kInvalidArgument,
          "losses and their weight must be non-negative");
  return {l_ldm, l_ihbt, l_ldm + l_ihbt * gamma_loss, gamma_loss};
}

inline LossBreakdown<double> total_loss(double l_ldm, double l_ihbt, double gamma_loss = 0.1) {
  return total_loss<double>(l_ldm, l_ihbt, gamma_loss);
}

// ---------------------------------------------------------------------------
// Shader stack: the trainable Instance Shader on one feature map, optionally
// merged with the Refined Shader, evaluated against a target noise.

struct StackSample {
  Tensor x;                             // H x W x C feature
  std::vector<ShadingInstance> instances;
  Tensor global_embedding;              // global text tokens
  Tensor eps_true;                      // H x W x C
};

struct StackConfig {
  ShaderDims dims;
  CrossAttentionParams<double> frozen;  // base cross-attention, never trained
  bool refined = true;
  double alpha = 1.0;
  double beta = 0.0;
  double gamma_loss = 0.1;
};

/// Toy sizes used by the gradient check and the training smoke run.
inline ShaderDims toy_shader_dims() {
  ShaderDims d;
  d.channels = 4;
  d.attn_dim = 4;
  d.embed_dim = 8;
  d.heads = 1;
  d.fourier_freqs = 4;
  d.grounding_hidden = 8;
  d.position_tokens = 1;
  d.capacity = 10;
  d.reduction = 4;
  return d;
}

inline StackConfig toy_stack_config(std::uint64_t seed = 11) {
  StackConfig c;
  c.dims = toy_shader_dims();
  Rng rng(seed);
  c.frozen = CrossAttentionParams<double>::random(rng, c.dims.channels, c.dims.attn_dim, c.dims.embed_dim, 0.5);
  return c;
}

/// Per-instance cross-attention maps from the frozen base attention over the
/// joint key set [global tokens; instance 1 tokens; ...], averaged over
/// heads and summed over each instance's token slots.
template <class T>
std::vector<BasicTensor<T>> instance_attention_maps(const BasicTensor<T>& x, const Tensor& global_embedding,
                                                    const std::vector<ShadingInstance>& instances,
                                                    const CrossAttentionParams<T>& frozen, std::size_t heads) {
  const BasicTensor<T> tokens = as_tokens(x);
  BasicTensor<T> keys = frozen.k(global_embedding.cast<T>());
  std::vector<std::size_t> offsets;
  for (const auto& inst : instances) {
    offsets.push_back(keys.dim(0));
    const BasicTensor<T> a = inst.attribute.template cast<T>();
    keys = concat_rows(keys, inst.modality == Modality::kImage ? frozen.k_image(a) : frozen.k(a));
  }
  offsets.push_back(keys.dim(0));
  BasicTensor<T> probs;
  scaled_dot_attention(frozen.q(tokens), keys, keys, nullptr, heads, &probs);
  const std::size_t lk = keys.dim(0);
  std::vector<BasicTensor<T>> maps;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    BasicTensor<T> m({x.dim(0), x.dim(1)});
    for (std::size_t t = 0; t < m.size(); ++t)
      for (std::size_t j = offsets[i]; j < offsets[i + 1]; ++j) m[t] += probs[t * lk + j];
    maps.push_back(std::move(m));
  }
  return maps;
}

/// eps_pred = X + R with R the (merged) shading; total loss with the
/// inhibition term computed on the shaded feature.
template <class T>
LossBreakdown<T> stack_loss(const ShaderParams<T>& params, const StackSample& s, const StackConfig& cfg,
                            const CrossAttentionParams<T>& frozen) {
  const BasicTensor<T> x = s.x.template cast<T>();
  BasicTensor<T> r = instance_shader(x, s.instances, params).output;
  if (cfg.refined) {
    const RefinedAggregate<T> ref =
        refined_shader(x, s.global_embedding, s.instances, frozen, cfg.alpha, cfg.beta, cfg.dims.heads);
    r = merge_shaders(r, ref.output, params.gamma());
  }
  const BasicTensor<T> shaded = x + r;
  const T l_ldm = denoising_loss(s.eps_true.template cast<T>(), shaded);
  std::vector<PositionMap> regions;
  for (const auto& inst : s.instances) regions.push_back(rasterize_position(inst.position, x.dim(0), x.dim(1)));
  const PositionMap bg = background_mask(regions, x.dim(0), x.dim(1));
  const T l_ihbt =
      inhibition_loss(instance_attention_maps(shaded, s.global_embedding, s.instances, frozen, cfg.dims.heads), bg);
  return total_loss<T>(l_ldm, l_ihbt, cfg.gamma_loss);
}

template <class T>
LossBreakdown<T> batch_loss(const ShaderParams<T>& params, const std::vector<StackSample>& batch,
                            const StackConfig& cfg) {
  require(!batch.empty(), ErrorKind::kInvalidArgument, "empty batch");
  const CrossAttentionParams<T> frozen = cfg.frozen.template cast<T>();
  LossBreakdown<T> acc;
  acc.gamma_loss = cfg.gamma_loss;
  for (const auto& s : batch) {
    const LossBreakdown<T> l = stack_loss(params, s, cfg, frozen);
    acc.l_ldm += l.l_ldm;
    acc.l_ihbt += l.l_ihbt;
    acc.total += l.total;
  }
  const double n = static_cast<double>(batch.size());
  acc.l_ldm = acc.l_ldm / n;
  acc.l_ihbt = acc.l_ihbt / n;
  acc.total = acc.total / n;
  return acc;
}

// ---------------------------------------------------------------------------
// Staged evaluation for finite differences. A probe on one parameter group
// only recomputes the stages downstream of it.

enum class Stage { kEnhance, kLayout, kAggregation, kMerge };

inline Stage stage_of(ParamGroup g) {
  switch (g) {
    case ParamGroup::kGrounding: case ParamGroup::kEnhanceText: case ParamGroup::kEnhanceImage: return Stage::kEnhance;
    case ParamGroup::kLayout: return Stage::kLayout;
    case ParamGroup::kAggregation: return Stage::kAggregation;
    case ParamGroup::kMerge: return Stage::kMerge;
  }
  return Stage::kEnhance;
}

struct StackCache {
  std::vector<Tensor> shading;
  Tensor templ;
  Tensor inst;
  std::optional<Tensor> ref;  // frozen Refined Shader output
  std::vector<PositionMap> regions;
  PositionMap bg;
};

/// Same value as stack_loss<double>; stages before `from` are taken from `cache`.
inline double staged_loss(const ShaderParams<double>& params, const StackSample& s, const StackConfig& cfg,
                          const StackCache& cache, Stage from) {
  std::vector<Tensor> fresh;
  if (from == Stage::kEnhance)
    for (const auto& inst : s.instances) fresh.push_back(enhance_instance(s.x, inst, params));
  const std::vector<Tensor>& shading = from == Stage::kEnhance ? fresh : cache.shading;
  const Tensor templ = from <= Stage::kLayout
                           ? layout_attention(s.x, layout_attention_mask(cache.regions, cache.bg), params.la, params.dims.heads)
                           : cache.templ;
  Tensor r = from <= Stage::kAggregation ? shading_aggregation(shading, templ, params.sac).output : cache.inst;
  if (cache.ref) r = merge_shaders(r, *cache.ref, params.gamma());
  const Tensor shaded = s.x + r;
  const double l_ldm = denoising_loss(s.eps_true, shaded);
  const double l_ihbt =
      inhibition_loss(instance_attention_maps(shaded, s.global_embedding, s.instances, cfg.frozen, cfg.dims.heads), cache.bg);
  return total_loss(l_ldm, l_ihbt, cfg.gamma_loss).total;
}

inline StackCache build_stack_cache(const ShaderParams<double>& params, const StackSample& s, const StackConfig& cfg) {
  StackCache c;
  for (const auto& inst : s.instances) c.regions.push_back(rasterize_position(inst.position, s.x.dim(0), s.x.dim(1)));
  c.bg = background_mask(c.regions, s.x.dim(0), s.x.dim(1));
  for (const auto& inst : s.instances) c.shading.push_back(enhance_instance(s.x, inst, params));
  c.templ = layout_attention(s.x, layout_attention_mask(c.regions, c.bg), params.la, params.dims.heads);
  c.inst = shading_aggregation(c.shading, c.templ, params.sac).output;
  if (cfg.refined) c.ref = refined_shader(s.x, s.global_embedding, s.instances, cfg.frozen, cfg.alpha, cfg.beta, cfg.dims.heads).output;
  return c;
}

// ---------------------------------------------------------------------------
// Flat parameter access.

/// Pointers to every trainable scalar of the selected groups, in visit order.
struct ParamSlots {
  std::vector<double*> values;
  std::vector<ParamGroup> groups;
};

inline ParamSlots param_slots(ShaderParams<double>& p, const std::set<ParamGroup>& trainable) {
  ParamSlots s;
  p.visit([&](ParamGroup g, Tensor& t) {
    if (!trainable.count(g)) return;
    for (auto& v : t.storage()) {
      s.values.push_back(&v);
      s.groups.push_back(g);
    }
  });
  return s;
}

inline std::set<ParamGroup> all_groups() {
  return {ParamGroup::kGrounding, ParamGroup::kEnhanceText, ParamGroup::kEnhanceImage,
          ParamGroup::kLayout,    ParamGroup::kAggregation, ParamGroup::kMerge};
}

// ---------------------------------------------------------------------------
// Gradient check.

inline constexpr double kGradCheckTolerance = 1e-4;

struct GradCheckResult {
  double worst = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::map<ParamGroup, double> worst_by_group;

  bool passed(double tol = kGradCheckTolerance) const { return worst <= tol; }
};

inline double relative_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6});
}

inline void require_epsilon(double eps) {
  require(eps >= 1e-7 && eps <= 1e-3, ErrorKind::kInvalidArgument, "finite-difference epsilon must lie in [1e-7, 1e-3]");
}

inline double central_difference(const std::function<double(const std::vector<double>&)>& loss,
                                 std::vector<double>& w, std::size_t i, double eps) {
  const double keep = w[i];
  w[i] = keep + eps;
  const double up = loss(w);
  w[i] = keep - eps;
  const double down = loss(w);
  w[i] = keep;
  require(std::isfinite(up) && std::isfinite(down), ErrorKind::kNumeric, "non-finite loss during gradient check");
  return (up - down) / (2.0 * eps);
}

/// Compares `gradient(w)` against central differences of `loss` for every
/// coordinate of w.
inline GradCheckResult grad_check(const std::function<double(const std::vector<double>&)>& loss,
                                  const std::function<std::vector<double>(const std::vector<double>&)>& gradient,
                                  std::vector<double> w, double eps) {
  require_epsilon(eps);
  require(std::isfinite(loss(w)), ErrorKind::kNumeric, "non-finite loss");
  const std::vector<double> g = gradient(w);
  require(g.size() == w.size(), ErrorKind::kShape, "gradient size does not match parameter count");
  GradCheckResult res;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double e = relative_error(g[i], central_difference(loss, w, i, eps));
    if (e > res.worst || i == 0) {
      res.worst = e;
      res.worst_index = i;
    }
    ++res.checked;
  }
  return res;
}

struct ShaderGradCheckOptions {
  double epsilon = 1e-5;
  std::set<ParamGroup> groups = all_groups();
  bool corrupt_analytic = false;  // negative control: perturbs every analytic entry
};

/// Forward-mode (dual number) gradient of the batch loss for every selected
/// scalar, one seeded pass per scalar.
inline std::vector<double> analytic_gradient(const ShaderParams<double>& params, const std::vector<StackSample>& batch,
                                             const StackConfig& cfg, const std::set<ParamGroup>& groups) {
  ShaderParams<double> copy = params;
  const std::size_t n = param_slots(copy, groups).values.size();
  std::vector<double> grad(n);
  for (std::size_t j = 0; j < n; ++j) {
    ShaderParams<Dual> dp = params.cast<Dual>();
    std::size_t k = 0;
    dp.visit([&](ParamGroup g, BasicTensor<Dual>& t) {
      if (!groups.count(g)) return;
      for (auto& v : t.storage()) {
        if (k++ == j) v.d = 1.0;
      }
    });
    grad[j] = batch_loss(dp, batch, cfg).total.d;
  }
  return grad;
}

inline GradCheckResult grad_check_shader(const ShaderParams<double>& params, const std::vector<StackSample>& batch,
                                         const StackConfig& cfg, const ShaderGradCheckOptions& opt = {}) {
  require_epsilon(opt.epsilon);
  ShaderParams<double> work = params;
  ParamSlots slots = param_slots(work, opt.groups);
  require(!slots.values.empty(), ErrorKind::kInvalidArgument, "no trainable parameters selected");
  auto eval = [&] {
    const double l = batch_loss(work, batch, cfg).total;
    require(std::isfinite(l), ErrorKind::kNumeric, "non-finite loss during gradient check");
    return l;
  };
  eval();
  std::vector<double> analytic = analytic_gradient(params, batch, cfg, opt.groups);
  if (opt.corrupt_analytic)
    for (auto& a : analytic) a = a * 1.1 + 1e-3;

  GradCheckResult res;
  for (std::size_t i = 0; i < slots.values.size(); ++i) {
    double& w = *slots.values[i];
    const double keep = w;
    w = keep + opt.epsilon;
    const double up = eval();
    w = keep - opt.epsilon;
    const double down = eval();
    w = keep;
    const double e = relative_error(analytic[i], (up - down) / (2.0 * opt.epsilon));
    if (i == 0 || e > res.worst) {
      res.worst = e;
      res.worst_index = i;
    }
    double& gw = res.worst_by_group[slots.groups[i]];
    gw = std::max(gw, e);
    ++res.checked;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Synthetic box-shading task and the toy training loop.

enum class TrainMode { kText, kImage };

inline constexpr std::size_t kTextTrainInstances = 6;
inline constexpr std::size_t kImageTrainInstances = 4;

/// Fixed projection from attribute space to feature channels defining the
/// target shading u_i = P * mean(attribute tokens).
inline Tensor task_projection(const ShaderDims& d, std::uint64_t seed) {
  Rng rng(seed);
  Tensor p({d.embed_dim, d.channels});
  for (auto& v : p.storage()) v = rng.normal(0.0, 1.0);
  return p;
}

inline Tensor box_shading_target(const Tensor& x, const std::vector<ShadingInstance>& instances, const Tensor& proj) {
  Tensor target = x;
  const std::size_t c = x.dim(2);
  for (const auto& inst : instances) {
    const PositionMap m = rasterize_position(inst.position, x.dim(0), x.dim(1));
    if (m.empty()) continue;
    std::vector<double> u(c, 0.0);
    const std::size_t rows = inst.attribute.dim(0), e = inst.attribute.dim(1);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < e; ++j)
        for (std::size_t k = 0; k < c; ++k) u[k] += inst.attribute.at(r, j) * proj.at(j, k) / static_cast<double>(rows);
    for (std::size_t t = 0; t < m.size(); ++t)
      if (m[t])
        for (std::size_t k = 0; k < c; ++k) target[t * c + k] += u[k];
  }
  return target;
}

/// Pads a list of instance descriptions to the training instance count:
/// null text with an empty box, or the blank white image with an empty box.
inline std::vector<InstanceDescription> pad_instances(std::vector<InstanceDescription> inst, TrainMode mode) {
  const std::size_t want = mode == TrainMode::kText ? kTextTrainInstances : kImageTrainInstances;
  require(inst.size() <= want, ErrorKind::kBatchShape,
          std::to_string(inst.size()) + " instances exceed the training count " + std::to_string(want));
  while (inst.size() < want) {
    InstanceDescription pad;
    pad.id = "pad-" + std::to_string(inst.size());
    if (mode == TrainMode::kText)
      pad.attribute = TextAttribute{};
    else
      pad.attribute = ImageAttribute{kBlankImageId};
    pad.position = Box{0, 0, 0, 0};
    inst.push_back(std::move(pad));
  }
  return inst;
}

inline void check_batch_shape(const std::vector<StackSample>& batch, TrainMode mode) {
  const std::size_t want = mode == TrainMode::kText ? kTextTrainInstances : kImageTrainInstances;
  const Modality m = mode == TrainMode::kText ? Modality::kText : Modality::kImage;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    require(batch[i].instances.size() == want, ErrorKind::kBatchShape,
            "sample " + std::to_string(i) + " has " + std::to_string(batch[i].instances.size()) +
                " instances; training expects exactly " + std::to_string(want) + " after padding");
    for (const auto& inst : batch[i].instances)
      require(inst.modality == m, ErrorKind::kBatchShape,
              "sample " + std::to_string(i) + " mixes modalities; pad with the mode's null instance");
  }
}

struct SyntheticTaskConfig {
  std::size_t samples = 4;
  std::size_t height = 4, width = 4;
  std::size_t min_instances = 1, max_instances = 3;
  TrainMode mode = TrainMode::kText;
  std::uint64_t seed = 3;
};

inline const std::vector<std::string>& toy_vocabulary() {
  static const std::vector<std::string> words = {"red",  "blue", "green", "yellow", "purple", "white",
                                                 "black", "dog", "cat",   "car",    "apple",  "bench"};
  return words;
}

/// Random scenes of boxes snapped to the feature grid with targets
/// X + sum_i M_i * u_i, padded to the mode's instance count.
inline std::vector<StackSample> synthetic_box_task(const SyntheticTaskConfig& tc, const ShaderDims& d,
                                                   EncoderContext& enc) {
  require(tc.max_instances >= tc.min_instances, ErrorKind::kInvalidArgument, "bad instance range");
  Rng rng(tc.seed);
  const Tensor proj = task_projection(d, tc.seed + 1);
  const auto& vocab = toy_vocabulary();
  if (tc.mode == TrainMode::kImage) {
    for (std::size_t i = 0; i < 6; ++i) {
      const Rgb color{static_cast<std::uint8_t>(rng.below(256)), static_cast<std::uint8_t>(rng.below(256)),
                      static_cast<std::uint8_t>(rng.below(256))};
      enc.images.add("swatch-" + std::to_string(i), RgbImage::filled(8, 8, color));
    }
  }
  auto snap = [&](std::size_t cells) {
    const std::size_t a = rng.below(cells), b = rng.below(cells);
    return std::pair<double, double>{static_cast<double>(std::min(a, b)) / static_cast<double>(cells),
                                     static_cast<double>(std::max(a, b) + 1) / static_cast<double>(cells)};
  };
  std::vector<StackSample> out;
  for (std::size_t s = 0; s < tc.samples; ++s) {
    StackSample sample;
    sample.x = Tensor({tc.height, tc.width, d.channels});
    for (auto& v : sample.x.storage()) v = rng.normal(0.0, 0.5);
    const std::size_t n = tc.min_instances + rng.below(tc.max_instances - tc.min_instances + 1);
    std::vector<InstanceDescription> desc;
    std::vector<std::string> global;
    for (std::size_t i = 0; i < n; ++i) {
      InstanceDescription inst;
      inst.id = "i" + std::to_string(i);
      const auto [y0, y1] = snap(tc.height);
      const auto [x0, x1] = snap(tc.width);
      inst.position = Box{x0, y0, x1, y1};
      if (tc.mode == TrainMode::kText) {
        const std::string a = vocab[rng.below(7)], o = vocab[7 + rng.below(vocab.size() - 7)];
        inst.attribute = TextAttribute{{a, o}};
        global.push_back(a);
        global.push_back(o);
      } else {
        inst.attribute = ImageAttribute{"swatch-" + std::to_string(rng.below(6))};
        global.push_back("thing");
      }
      desc.push_back(std::move(inst));
    }
    for (const auto& inst : pad_instances(std::move(desc), tc.mode)) sample.instances.push_back(prepare_instance(inst, enc));
    sample.global_embedding = encode_text(global, d.embed_dim);
    sample.eps_true = box_shading_target(sample.x, sample.instances, proj);
    out.push_back(std::move(sample));
  }
  return out;
}

struct TrainConfig {
  std::size_t steps = 200;
  double lr = 5.0;
  double fd_epsilon = 1e-5;
  TrainMode mode = TrainMode::kText;
  std::function<void(std::size_t step, const LossBreakdown<double>&)> on_step;
};

struct TrainResult {
  ShaderParams<double> params;
  std::vector<double> loss_trace;  // total loss before each step, then the final loss
};

/// Groups updated by each training mode. Text mode leaves the image-modality
/// Enhance Attention untouched (no image instances feed it); image mode
/// freezes everything except the image-modality Enhance Attention.
inline std::set<ParamGroup> trainable_groups(TrainMode mode) {
  if (mode == TrainMode::kImage) return {ParamGroup::kEnhanceImage};
  return {ParamGroup::kGrounding, ParamGroup::kEnhanceText, ParamGroup::kLayout, ParamGroup::kAggregation,
          ParamGroup::kMerge};
}

/// Plain gradient descent with central finite-difference gradients.
inline TrainResult train_toy(ShaderParams<double> params, const std::vector<StackSample>& batch,
                             const StackConfig& cfg, const TrainConfig& tc) {
  require_epsilon(tc.fd_epsilon);
  require(tc.lr >= 0.0, ErrorKind::kInvalidArgument, "learning rate must be non-negative");
  check_batch_shape(batch, tc.mode);
  TrainResult res;
  ParamSlots slots = param_slots(params, trainable_groups(tc.mode));
  std::vector<double> grad(slots.values.size());
  auto eval = [&] {
    const LossBreakdown<double> l = batch_loss(params, batch, cfg);
    require(std::isfinite(l.total), ErrorKind::kNumeric, "training loss became non-finite");
    return l;
  };
  std::vector<StackCache> caches(batch.size());
  auto probe = [&](Stage from) {
    double total = 0.0;
    for (std::size_t k = 0; k < batch.size(); ++k) total += staged_loss(params, batch[k], cfg, caches[k], from);
    total /= static_cast<double>(batch.size());
    require(std::isfinite(total), ErrorKind::kNumeric, "training loss became non-finite");
    return total;
  };
  for (std::size_t step = 0; step < tc.steps; ++step) {
    const LossBreakdown<double> l = eval();
    res.loss_trace.push_back(l.total);
    if (tc.on_step) tc.on_step(step, l);
    for (std::size_t k = 0; k < batch.size(); ++k) caches[k] = build_stack_cache(params, batch[k], cfg);
    for (std::size_t i = 0; i < slots.values.size(); ++i) {
      double& w = *slots.values[i];
      const Stage from = stage_of(slots.groups[i]);
      const double keep = w;
      w = keep + tc.fd_epsilon;
      const double up = probe(from);
      w = keep - tc.fd_epsilon;
      const double down = probe(from);
      w = keep;
      grad[i] = (up - down) / (2.0 * tc.fd_epsilon);
    }
    for (std::size_t i = 0; i < slots.values.size(); ++i) *slots.values[i] -= tc.lr * grad[i];
  }
  res.loss_trace.push_back(eval().total);
  res.params = std::move(params);
  return res;
}

inline constexpr double kToyInitStddev = 0.3;

/// Seeded synthetic batch, frozen stack and initial shader for train-toy.
struct ToyTrainingSetup {
  StackConfig cfg;
  ShaderParams<double> params;
  std::vector<StackSample> batch;
};

inline ToyTrainingSetup toy_training_setup(TrainMode mode = TrainMode::kText, std::uint64_t seed = 1,
                                           std::size_t samples = 4) {
  ToyTrainingSetup t;
  t.cfg = toy_stack_config(seed + 10);
  t.params = ShaderParams<double>::random(seed, t.cfg.dims, kToyInitStddev);
  EncoderContext enc;
  enc.embed_dim = t.cfg.dims.embed_dim;
  enc.projector = ImageProjector::identity(enc.embed_dim);
  SyntheticTaskConfig task;
  task.samples = samples;
  task.mode = mode;
  task.max_instances = mode == TrainMode::kImage ? 2 : 3;
  task.seed = seed + 2;
  t.batch = synthetic_box_task(task, t.cfg.dims, enc);
  return t;
}

/// Downsized stack for the gradient check: toy dims, a small feature map with
/// text instances, every scalar (biases included) drawn from N(0, 0.3) and the
/// merge scalar moved off 0 so both shaders receive gradient.
struct GradCheckSetup {
  ShaderParams<double> params;
  std::vector<StackSample> batch;
  StackConfig cfg;
};

inline GradCheckSetup toy_gradcheck_setup(std::uint64_t seed = 5, std::size_t height = 4, std::size_t width = 4,
                                          std::size_t instances = 2) {
  require(height * width <= 64 && instances <= 4, ErrorKind::kConfig,
          "gradient check is limited to toy sizes (at most 64 feature pixels and 4 instances); "
          "reduce --height/--width/--instances");
  GradCheckSetup g;
  g.cfg = toy_stack_config(seed + 100);
  g.params = ShaderParams<double>::random(seed, g.cfg.dims, 0.3);
  Rng init(seed + 400);
  g.params.visit([&](ParamGroup, Tensor& t) {
    for (auto& v : t.storage()) v = init.normal(0.0, 0.3);
  });
  g.params.gamma_merge[0] = 0.5;
  EncoderContext enc;
  enc.embed_dim = g.cfg.dims.embed_dim;
  SyntheticTaskConfig tc;
  tc.samples = 1;
  tc.height = height;
  tc.width = width;
  tc.min_instances = tc.max_instances = instances;
  tc.seed = seed + 200;
  g.batch = synthetic_box_task(tc, g.cfg.dims, enc);
  for (auto& s : g.batch) {
    // Drop the padding so only real instances feed the check.
    s.instances.resize(instances);
    Rng rng(seed + 300);
    for (auto& v : s.eps_true.storage()) v += rng.normal(0.0, 0.3);
  }
  return g;
}

}  // namespace migc
