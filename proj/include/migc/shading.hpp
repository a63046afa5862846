#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "migc/encoders.hpp"
#include "migc/tensor.hpp"

namespace migc {

/// Sizes of one Instance Shader. `capacity` is the padded slot count N of the
/// aggregation controller; a shader handles at most N-1 instances.
struct ShaderDims {
  std::size_t channels = 8;
  std::size_t attn_dim = 8;
  std::size_t embed_dim = 16;
  std::size_t heads = 1;
  std::size_t fourier_freqs = 8;
  std::size_t grounding_hidden = 32;
  std::size_t position_tokens = 1;
  std::size_t capacity = 10;
  std::size_t reduction = 4;

  std::size_t max_instances() const { return capacity == 0 ? 0 : capacity - 1; }
  friend bool operator==(const ShaderDims&, const ShaderDims&) = default;
};

enum class ParamGroup { kGrounding, kEnhanceText, kEnhanceImage, kLayout, kAggregation, kMerge };

inline const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kGrounding: return "grounding";
    case ParamGroup::kEnhanceText: return "enhance_text";
    case ParamGroup::kEnhanceImage: return "enhance_image";
    case ParamGroup::kLayout: return "layout";
    case ParamGroup::kAggregation: return "aggregation";
    case ParamGroup::kMerge: return "merge";
  }
  return "?";
}

/// Query from image features, key/value from a grounding embedding.
template <class T>
struct EnhanceAttentionParams {
  Linear<T> q, k, v;

  static EnhanceAttentionParams random(Rng& rng, const ShaderDims& d, double stddev) {
    return {Linear<T>::random(rng, d.channels, d.attn_dim, stddev),
            Linear<T>::random(rng, d.embed_dim, d.attn_dim, stddev),
            Linear<T>::random(rng, d.embed_dim, d.channels, stddev)};
  }
  template <class U>
  EnhanceAttentionParams<U> cast() const {
    return {q.template cast<U>(), k.template cast<U>(), v.template cast<U>()};
  }
  template <class Fn>
  void visit(Fn&& fn) {
    q.visit(fn);
    k.visit(fn);
    v.visit(fn);
  }
};

/// Self-attention projections used by Layout Attention.
template <class T>
struct LayoutAttentionParams {
  Linear<T> q, k, v;

  static LayoutAttentionParams random(Rng& rng, const ShaderDims& d, double stddev) {
    return {Linear<T>::random(rng, d.channels, d.attn_dim, stddev),
            Linear<T>::random(rng, d.channels, d.attn_dim, stddev),
            Linear<T>::random(rng, d.channels, d.channels, stddev)};
  }
  template <class U>
  LayoutAttentionParams<U> cast() const {
    return {q.template cast<U>(), k.template cast<U>(), v.template cast<U>()};
  }
  template <class Fn>
  void visit(Fn&& fn) {
    q.visit(fn);
    k.visit(fn);
    v.visit(fn);
  }
};

/// Shading Aggregation Controller: a shared 1x1 conv on every input, a 1x1
/// score conv to one logit map per slot, then CBAM over the N slots
/// (channel attention from mean+max pooling through a shared two-layer
/// perceptron, spatial attention from a 3x3 conv over slot-pooled maps).
template <class T>
struct AggregationParams {
  Linear<T> conv;
  Linear<T> score;
  Linear<T> channel_fc1;
  Linear<T> channel_fc2;
  BasicTensor<T> spatial_kernel;  // 2 x 3 x 3 (mean map, max map)
  BasicTensor<T> spatial_bias;    // 1
  std::size_t capacity = 10;

  static AggregationParams random(Rng& rng, const ShaderDims& d, double stddev) {
    const std::size_t hidden = std::max<std::size_t>(1, d.capacity / std::max<std::size_t>(1, d.reduction));
    AggregationParams p{Linear<T>::random(rng, d.channels, d.channels, stddev),
                        Linear<T>::random(rng, d.channels, 1, stddev),
                        Linear<T>::random(rng, d.capacity, hidden, stddev),
                        Linear<T>::random(rng, hidden, d.capacity, stddev),
                        BasicTensor<T>({2, 3, 3}),
                        BasicTensor<T>({1}),
                        d.capacity};
    for (auto& w : p.spatial_kernel.storage()) w = T(rng.normal(0.0, stddev));
    return p;
  }
  template <class U>
  AggregationParams<U> cast() const {
    return {conv.template cast<U>(),        score.template cast<U>(),
            channel_fc1.template cast<U>(), channel_fc2.template cast<U>(),
            spatial_kernel.template cast<U>(), spatial_bias.template cast<U>(),
            capacity};
  }
  template <class Fn>
  void visit(Fn&& fn) {
    conv.visit(fn);
    score.visit(fn);
    channel_fc1.visit(fn);
    channel_fc2.visit(fn);
    fn(spatial_kernel);
    fn(spatial_bias);
  }
};

/// Trainable parameters of one Instance Shader plus the merge scalar.
template <class T>
struct ShaderParams {
  ShaderDims dims;
  GroundingMlp<T> grounding;
  EnhanceAttentionParams<T> ea_text;
  EnhanceAttentionParams<T> ea_image;
  LayoutAttentionParams<T> la;
  AggregationParams<T> sac;
  BasicTensor<T> gamma_merge = BasicTensor<T>({1});

  /// Seeded N(0, stddev) initialization; the merge scalar starts at exactly 0.
  static ShaderParams random(std::uint64_t seed, const ShaderDims& d, double stddev = 0.02) {
    Rng rng(seed);
    ShaderParams p;
    p.dims = d;
    p.grounding = GroundingMlp<T>::random(rng, d.fourier_freqs, d.grounding_hidden, d.embed_dim,
                                          d.position_tokens, stddev);
    p.ea_text = EnhanceAttentionParams<T>::random(rng, d, stddev);
    p.ea_image = EnhanceAttentionParams<T>::random(rng, d, stddev);
    p.la = LayoutAttentionParams<T>::random(rng, d, stddev);
    p.sac = AggregationParams<T>::random(rng, d, stddev);
    p.gamma_merge = BasicTensor<T>({1});
    return p;
  }

  T gamma() const { return gamma_merge[0]; }

  const EnhanceAttentionParams<T>& enhance(Modality m) const {
    return m == Modality::kImage ? ea_image : ea_text;
  }

  template <class U>
  ShaderParams<U> cast() const {
    ShaderParams<U> p;
    p.dims = dims;
    p.grounding = grounding.template cast<U>();
    p.ea_text = ea_text.template cast<U>();
    p.ea_image = ea_image.template cast<U>();
    p.la = la.template cast<U>();
    p.sac = sac.template cast<U>();
    p.gamma_merge = gamma_merge.template cast<U>();
    return p;
  }

  /// Calls fn(group, tensor&) for every trainable tensor in a fixed order.
  template <class Fn>
  void visit(Fn&& fn) {
    auto tag = [&](ParamGroup g) { return [&fn, g](BasicTensor<T>& t) { fn(g, t); }; };
    grounding.visit(tag(ParamGroup::kGrounding));
    ea_text.visit(tag(ParamGroup::kEnhanceText));
    ea_image.visit(tag(ParamGroup::kEnhanceImage));
    la.visit(tag(ParamGroup::kLayout));
    sac.visit(tag(ParamGroup::kAggregation));
    fn(ParamGroup::kMerge, gamma_merge);
  }
  template <class Fn>
  void visit(Fn&& fn) const {
    const_cast<ShaderParams*>(this)->visit(
        [&fn](ParamGroup g, BasicTensor<T>& t) { fn(g, static_cast<const BasicTensor<T>&>(t)); });
  }
};

/// Frozen base-model cross-attention of one block (text K/V) together with
/// the image projector's K/V layers, which share the text query.
template <class T>
struct CrossAttentionParams {
  Linear<T> q, k, v;
  Linear<T> k_image, v_image;

  static CrossAttentionParams random(Rng& rng, std::size_t channels, std::size_t attn_dim, std::size_t embed_dim,
                                     double stddev) {
    return {Linear<T>::random(rng, channels, attn_dim, stddev, false),
            Linear<T>::random(rng, embed_dim, attn_dim, stddev, false),
            Linear<T>::random(rng, embed_dim, channels, stddev, false),
            Linear<T>::random(rng, embed_dim, attn_dim, stddev, false),
            Linear<T>::random(rng, embed_dim, channels, stddev, false)};
  }
  template <class U>
  CrossAttentionParams<U> cast() const {
    return {q.template cast<U>(), k.template cast<U>(), v.template cast<U>(), k_image.template cast<U>(),
            v_image.template cast<U>()};
  }
};

// ---------------------------------------------------------------------------
// Feature-map helpers. A feature map is an H x W x C tensor; flattening the two
// spatial axes gives an (HW) x C token matrix without copying the layout.

template <class T>
BasicTensor<T> as_tokens(const BasicTensor<T>& x) {
  require(x.rank() == 3, ErrorKind::kShape, "feature map must be H x W x C, got " + shape_string(x.shape()));
  return x.reshaped({x.dim(0) * x.dim(1), x.dim(2)});
}

template <class T>
void require_map_matches(const BasicTensor<T>& x, const PositionMap& m, const std::string& what) {
  require(x.rank() == 3 && m.height() == x.dim(0) && m.width() == x.dim(1), ErrorKind::kShape,
          what + ": position map " + std::to_string(m.height()) + "x" + std::to_string(m.width()) +
              " does not match feature map " + shape_string(x.shape()));
}

/// Enhance Attention: Softmax(Q K^T / sqrt(d)) V, then zeroed wherever M = 0.
/// Q comes from the image features, K and V from the grounding embedding.
template <class T>
BasicTensor<T> enhance_attention(const BasicTensor<T>& x, const GroundingEmbedding<T>& g, const PositionMap& m,
                                 const EnhanceAttentionParams<T>& p, std::size_t heads = 1) {
  require_map_matches(x, m, "enhance_attention");
  const BasicTensor<T> tokens = as_tokens(x);
  BasicTensor<T> out = scaled_dot_attention(p.q(tokens), p.k(g.vectors), p.v(g.vectors), nullptr, heads);
  const std::size_t c = out.dim(1);
  for (std::size_t t = 0; t < out.dim(0); ++t) {
    if (m[t]) continue;
    for (std::size_t j = 0; j < c; ++j) out[t * c + j] = T(0.0);
  }
  return out.reshaped({x.dim(0), x.dim(1), c});
}

/// Everything the shaders need about one instance, resolved from its
/// description once per scene: attribute embedding (text tokens or projected
/// image tokens), modality, box-standardized position and the raw position.
struct ShadingInstance {
  Tensor attribute;
  Modality modality = Modality::kText;
  Box box;
  Position position;
};

inline ShadingInstance prepare_instance(const InstanceDescription& inst, const EncoderContext& ctx) {
  if (const Box* b = std::get_if<Box>(&inst.position)) b->validate();
  return {ctx.attribute_embedding(inst.attribute), inst.modality(), position_box(inst.position), inst.position};
}

/// Enhance Attention for a prepared instance, using the weight set of its
/// modality and a grounding embedding built from its box.
template <class T>
BasicTensor<T> enhance_instance(const BasicTensor<T>& x, const ShadingInstance& inst, const ShaderParams<T>& params,
                                PositionMap* map_out = nullptr) {
  require(x.rank() == 3, ErrorKind::kShape, "feature map must be H x W x C");
  PositionMap m = rasterize_position(inst.position, x.dim(0), x.dim(1));
  if (m.empty()) {
    if (map_out) *map_out = std::move(m);
    return BasicTensor<T>({x.dim(0), x.dim(1), params.enhance(inst.modality).v.out_features()});
  }
  const GroundingEmbedding<T> g =
      make_grounding_embedding(params.grounding(inst.box), inst.attribute.template cast<T>());
  BasicTensor<T> out = enhance_attention(x, g, m, params.enhance(inst.modality), params.dims.heads);
  if (map_out) *map_out = std::move(m);
  return out;
}

/// Multimodal Enhance Attention for one instance description.
template <class T>
BasicTensor<T> multimodal_enhance(const BasicTensor<T>& x, const InstanceDescription& inst,
                                  const ShaderParams<T>& params, const EncoderContext& ctx) {
  return enhance_instance(x, prepare_instance(inst, ctx), params);
}

/// 1 exactly where every instance map is 0.
inline PositionMap background_mask(const std::vector<PositionMap>& maps, std::size_t height, std::size_t width) {
  PositionMap bg(height, width, true);
  for (const auto& m : maps) {
    require(m.height() == height && m.width() == width, ErrorKind::kShape, "instance maps differ in resolution");
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i]) bg.set(i, false);
  }
  return bg;
}

inline PositionMap background_mask(const std::vector<PositionMap>& maps) {
  require(!maps.empty(), ErrorKind::kInvalidArgument, "resolution unknown without instance maps");
  return background_mask(maps, maps.front().height(), maps.front().width());
}

/// Token p may attend to token q iff some map (instances or background)
/// covers both. Returned as an (HW) x (HW) mask.
inline AttentionMask layout_attention_mask(const std::vector<PositionMap>& maps, const PositionMap& bg) {
  const std::size_t h = bg.height(), w = bg.width(), n = h * w;
  require(background_mask(maps, h, w) == bg, ErrorKind::kInvalidArgument,
          "background map must be the complement of the union of instance maps");
  // Membership bitsets: one word per 64 maps.
  const std::size_t total = maps.size() + 1, words = (total + 63) / 64;
  std::vector<std::uint64_t> member(n * words, 0);
  auto mark = [&](const PositionMap& m, std::size_t index) {
    for (std::size_t t = 0; t < n; ++t)
      if (m[t]) member[t * words + index / 64] |= std::uint64_t{1} << (index % 64);
  };
  for (std::size_t i = 0; i < maps.size(); ++i) mark(maps[i], i);
  mark(bg, maps.size());
  AttentionMask mask({n, n}, false);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = 0; q < n; ++q) {
      bool shared = p == q;
      for (std::size_t k = 0; k < words && !shared; ++k) shared = (member[p * words + k] & member[q * words + k]) != 0;
      mask.set(p, q, shared);
    }
  }
  return mask;
}

/// Layout Attention: masked self-attention over the flattened feature map.
template <class T>
BasicTensor<T> layout_attention(const BasicTensor<T>& x, const AttentionMask& mask, const LayoutAttentionParams<T>& p,
                                std::size_t heads = 1) {
  const BasicTensor<T> tokens = as_tokens(x);
  const std::size_t n = tokens.dim(0);
  require(mask.shape() == Shape{n, n}, ErrorKind::kShape,
          "layout mask " + shape_string(mask.shape()) + " does not match " + std::to_string(n) + " tokens");
  BasicTensor<T> out = scaled_dot_attention(p.q(tokens), p.k(tokens), p.v(tokens), &mask, heads);
  return out.reshaped({x.dim(0), x.dim(1), out.dim(1)});
}

/// Aggregation weights for the n+1 real slots (instances first, template last)
/// stored in an H x W x N grid; padded slots are held at exactly 0.
template <class T>
struct AggregationWeights {
  BasicTensor<T> grid;
  std::size_t active = 0;
};

template <class T>
struct AggregationResult {
  BasicTensor<T> output;
  AggregationWeights<T> weights;
  std::vector<BasicTensor<T>> transformed;  // inputs after the shared 1x1 conv
};

/// Shading Aggregation Controller over n shading instances and one template.
template <class T>
AggregationResult<T> shading_aggregation(const std::vector<BasicTensor<T>>& instances, const BasicTensor<T>& templ,
                                         const AggregationParams<T>& p) {
  using std::exp;
  const std::size_t n_real = instances.size() + 1, slots = p.capacity;
  require(n_real <= slots, ErrorKind::kCapacity,
          std::to_string(instances.size()) + " shading instances plus the template exceed capacity " +
              std::to_string(slots));
  require(templ.rank() == 3, ErrorKind::kShape, "template must be H x W x C");
  for (const auto& r : instances) require_same_shape(r.shape(), templ.shape(), "shading_aggregation input");
  require(p.channel_fc1.in_features() == slots && p.channel_fc2.out_features() == slots, ErrorKind::kConfig,
          "channel attention is not sized for capacity " + std::to_string(slots));
  const std::size_t h = templ.dim(0), w = templ.dim(1), c = templ.dim(2), hw = h * w;

  AggregationResult<T> res;
  res.transformed.reserve(n_real);
  for (std::size_t j = 0; j < n_real; ++j) res.transformed.push_back(p.conv(j < instances.size() ? instances[j] : templ));

  // Slot logits, zero-padded to N slots: slots x (HW).
  std::vector<T> score(slots * hw, T(0.0));
  for (std::size_t j = 0; j < n_real; ++j) {
    const BasicTensor<T> s = p.score(res.transformed[j]);
    for (std::size_t t = 0; t < hw; ++t) score[j * hw + t] = s[t];
  }

  // Channel attention over slots.
  BasicTensor<T> avg({1, slots}), mx({1, slots});
  for (std::size_t j = 0; j < slots; ++j) {
    T sum(0.0), best = score[j * hw];
    for (std::size_t t = 0; t < hw; ++t) {
      sum += score[j * hw + t];
      if (score[j * hw + t] > best) best = score[j * hw + t];
    }
    avg[j] = sum / static_cast<double>(hw);
    mx[j] = best;
  }
  auto mlp = [&](const BasicTensor<T>& v) {
    BasicTensor<T> hdn = p.channel_fc1(v);
    for (auto& x : hdn.storage()) x = silu(x);
    return p.channel_fc2(hdn);
  };
  const BasicTensor<T> ca = mlp(avg) + mlp(mx);
  for (std::size_t j = 0; j < slots; ++j) {
    const T gate = sigmoid(ca[j]);
    for (std::size_t t = 0; t < hw; ++t) score[j * hw + t] = score[j * hw + t] * gate;
  }

  // Spatial attention: 3x3 conv (zero padding) over slot-mean and slot-max maps.
  std::vector<T> pooled(2 * hw);
  for (std::size_t t = 0; t < hw; ++t) {
    T sum(0.0), best = score[t];
    for (std::size_t j = 0; j < slots; ++j) {
      sum += score[j * hw + t];
      if (score[j * hw + t] > best) best = score[j * hw + t];
    }
    pooled[t] = sum / static_cast<double>(slots);
    pooled[hw + t] = best;
  }
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t col = 0; col < w; ++col) {
      T acc = p.spatial_bias[0];
      for (std::size_t ch = 0; ch < 2; ++ch) {
        for (int dr = -1; dr <= 1; ++dr) {
          for (int dc = -1; dc <= 1; ++dc) {
            const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(col) + dc;
            if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) continue;
            acc += p.spatial_kernel.at(ch, static_cast<std::size_t>(dr + 1), static_cast<std::size_t>(dc + 1)) *
                   pooled[ch * hw + static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc)];
          }
        }
      }
      const T gate = sigmoid(acc);
      const std::size_t t = r * w + col;
      for (std::size_t j = 0; j < slots; ++j) score[j * hw + t] = score[j * hw + t] * gate;
    }
  }

  // Per-pixel softmax over the real slots only; padded slots keep weight 0.
  res.weights.grid = BasicTensor<T>({h, w, slots});
  res.weights.active = n_real;
  res.output = BasicTensor<T>({h, w, c});
  std::vector<T> logits(n_real);
  for (std::size_t t = 0; t < hw; ++t) {
    for (std::size_t j = 0; j < n_real; ++j) logits[j] = score[j * hw + t];
    detail::softmax_row(std::span<T>(logits), [](std::size_t) { return true; });
    for (std::size_t j = 0; j < n_real; ++j) {
      res.weights.grid[t * slots + j] = logits[j];
      for (std::size_t k = 0; k < c; ++k) res.output[t * c + k] += logits[j] * res.transformed[j][t * c + k];
    }
  }
  require_finite(res.output, "shading_aggregation");
  return res;
}

template <class T>
struct InstanceShaderResult {
  BasicTensor<T> output;                    // R_inst
  std::vector<BasicTensor<T>> shading;      // R_ea per instance
  BasicTensor<T> templ;                     // R_la
  std::vector<PositionMap> maps;
  AggregationWeights<T> weights;
};

/// Instance Shader: Enhance Attention per instance, Layout Attention for the
/// template, then aggregation.
template <class T>
InstanceShaderResult<T> instance_shader(const BasicTensor<T>& x, const std::vector<ShadingInstance>& instances,
                                        const ShaderParams<T>& params) {
  require(x.rank() == 3, ErrorKind::kShape, "feature map must be H x W x C");
  require(instances.size() + 1 <= params.sac.capacity, ErrorKind::kCapacity,
          std::to_string(instances.size()) + " instances exceed shader capacity " +
              std::to_string(params.sac.capacity) + " (one slot is reserved for the template)");
  InstanceShaderResult<T> res;
  res.shading.reserve(instances.size());
  res.maps.reserve(instances.size());
  for (const auto& inst : instances) {
    PositionMap m;
    res.shading.push_back(enhance_instance(x, inst, params, &m));
    res.maps.push_back(std::move(m));
  }
  const PositionMap bg = background_mask(res.maps, x.dim(0), x.dim(1));
  res.templ = layout_attention(x, layout_attention_mask(res.maps, bg), params.la, params.dims.heads);
  AggregationResult<T> agg = shading_aggregation(res.shading, res.templ, params.sac);
  res.output = std::move(agg.output);
  res.weights = std::move(agg.weights);
  return res;
}

/// Per-instance refined shading with the frozen base weights: text K/V for
/// text attributes, image-projector K/V for image attributes; the query is the
/// base cross-attention query in both cases. No mask.
template <class T>
BasicTensor<T> refined_instance_shading(const BasicTensor<T>& x, const Tensor& attribute, Modality modality,
                                        const CrossAttentionParams<T>& frozen, std::size_t heads = 1,
                                        BasicTensor<T>* probabilities = nullptr) {
  const BasicTensor<T> tokens = as_tokens(x);
  const BasicTensor<T> emb = attribute.cast<T>();
  const BasicTensor<T> q = frozen.q(tokens);
  BasicTensor<T> out = modality == Modality::kImage
                           ? scaled_dot_attention(q, frozen.k_image(emb), frozen.v_image(emb), nullptr, heads, probabilities)
                           : scaled_dot_attention(q, frozen.k(emb), frozen.v(emb), nullptr, heads, probabilities);
  return out.reshaped({x.dim(0), x.dim(1), out.dim(1)});
}

/// Overload that resolves the attribute through the encoders.
template <class T>
BasicTensor<T> refined_instance_shading(const BasicTensor<T>& x, const Attribute& attribute,
                                        const CrossAttentionParams<T>& frozen, const EncoderContext& ctx,
                                        std::size_t heads = 1) {
  const Modality m = std::holds_alternative<ImageAttribute>(attribute) ? Modality::kImage : Modality::kText;
  return refined_instance_shading(x, ctx.attribute_embedding(attribute), m, frozen, heads);
}

template <class T>
struct RefinedAggregate {
  BasicTensor<T> output;
  Tensor weights;  // H x W x (n+1), global map first
};

/// Weighted sum of the global and per-instance refined shadings. Weight maps
/// are beta everywhere for the global result and alpha inside (0 outside) each
/// instance region; a per-pixel softmax across the maps gives the final weights.
template <class T>
RefinedAggregate<T> refined_aggregate(const BasicTensor<T>& global, const std::vector<BasicTensor<T>>& instances,
                                      const std::vector<PositionMap>& positions, double alpha, double beta) {
  require(global.rank() == 3, ErrorKind::kShape, "global shading must be H x W x C");
  require(instances.size() == positions.size(), ErrorKind::kShape, "one position map per refined instance");
  for (const auto& r : instances) require_same_shape(r.shape(), global.shape(), "refined_aggregate input");
  for (const auto& m : positions) require_map_matches(global, m, "refined_aggregate");
  const std::size_t h = global.dim(0), w = global.dim(1), c = global.dim(2), n = instances.size();
  RefinedAggregate<T> res{BasicTensor<T>(global.shape()), Tensor({h, w, n + 1})};
  std::vector<double> wts(n + 1);
  for (std::size_t t = 0; t < h * w; ++t) {
    wts[0] = beta;
    for (std::size_t i = 0; i < n; ++i) wts[i + 1] = positions[i][t] ? alpha : 0.0;
    detail::softmax_row(std::span<double>(wts), [](std::size_t) { return true; });
    for (std::size_t i = 0; i <= n; ++i) res.weights[t * (n + 1) + i] = wts[i];
    for (std::size_t k = 0; k < c; ++k) {
      T acc = global[t * c + k] * wts[0];
      for (std::size_t i = 0; i < n; ++i) acc += instances[i][t * c + k] * wts[i + 1];
      res.output[t * c + k] = acc;
    }
  }
  return res;
}

/// Refined Shader: global cross-attention plus one frozen cross-attention (or
/// image-projector attention) per instance, aggregated by weight maps.
template <class T>
RefinedAggregate<T> refined_shader(const BasicTensor<T>& x, const Tensor& global_embedding,
                                   const std::vector<ShadingInstance>& instances, const CrossAttentionParams<T>& frozen,
                                   double alpha, double beta, std::size_t heads = 1) {
  const BasicTensor<T> global = refined_instance_shading(x, global_embedding, Modality::kText, frozen, heads);
  std::vector<BasicTensor<T>> shaded;
  std::vector<PositionMap> maps;
  for (const auto& inst : instances) {
    shaded.push_back(refined_instance_shading(x, inst.attribute, inst.modality, frozen, heads));
    maps.push_back(rasterize_position(inst.position, x.dim(0), x.dim(1)));
  }
  return refined_aggregate(global, shaded, maps, alpha, beta);
}

/// R_merge = R_inst * tanh(gamma) + R_ref. A zero product leaves R_ref
/// bit-identical.
template <class T>
BasicTensor<T> merge_shaders(const BasicTensor<T>& inst, const BasicTensor<T>& ref, const T& gamma) {
  using std::tanh;
  require_same_shape(inst.shape(), ref.shape(), "merge_shaders");
  const T g = tanh(gamma);
  BasicTensor<T> out = ref;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = add_preserving(ref[i], inst[i] * g);
  return out;
}

}  // namespace migc
