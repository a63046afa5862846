#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>

#include "migc/scene.hpp"
#include "migc/shading.hpp"

namespace migc {

/// Which instances differ between two iterations of a scene, rasterized as
/// the union of their old and new position maps. Instances are matched by id.
inline PositionMap modify_mask(const SceneSpec& prev, const SceneSpec& cur, std::size_t height, std::size_t width) {
  PositionMap m(height, width);
  auto add = [&](const Position& pos) {
    const PositionMap r = rasterize_position(pos, height, width);
    for (std::size_t i = 0; i < r.size(); ++i)
      if (r[i]) m.set(i, true);
  };
  for (const auto& old_inst : prev.instances) {
    const InstanceDescription* now = cur.find(old_inst.id);
    if (!now) {
      add(old_inst.position);  // removed
    } else if (!(*now == old_inst)) {
      add(old_inst.position);  // changed: old and new footprint
      add(now->position);
    }
  }
  for (const auto& new_inst : cur.instances)
    if (!prev.find(new_inst.id)) add(new_inst.position);  // added
  return m;
}

/// z' = m * z_cur + (1 - m) * z_prev as an exact per-pixel selection over a
/// H x W x C latent.
inline Tensor blend_latents(const Tensor& z_cur, const Tensor& z_prev, const PositionMap& modify) {
  require_same_shape(z_cur.shape(), z_prev.shape(), "blend_latents");
  require(z_cur.rank() == 3 && modify.height() == z_cur.dim(0) && modify.width() == z_cur.dim(1), ErrorKind::kShape,
          "modify mask does not match latent " + shape_string(z_cur.shape()));
  Tensor out = z_prev;
  const std::size_t c = z_cur.dim(2);
  for (std::size_t t = 0; t < modify.size(); ++t) {
    if (!modify[t]) continue;
    for (std::size_t k = 0; k < c; ++k) out[t * c + k] = z_cur[t * c + k];
  }
  return out;
}

/// Frozen self-attention projections of one denoiser block.
template <class T>
struct SelfAttentionParams {
  Linear<T> q, k, v, out;

  static SelfAttentionParams random(Rng& rng, std::size_t channels, double stddev) {
    return {Linear<T>::random(rng, channels, channels, stddev, false),
            Linear<T>::random(rng, channels, channels, stddev, false),
            Linear<T>::random(rng, channels, channels, stddev, false),
            Linear<T>::random(rng, channels, channels, stddev, false)};
  }
};

/// Keys and values of one self-attention call, (HW) x C each.
struct KvEntry {
  Tensor k, v;
};

/// Self-attention whose keys/values are extended with a previous iteration's
/// cache: K = [K_cur ; K_prev], V = [V_cur ; V_prev]. Without a cache it is
/// plain self-attention. The current K/V are written to `current` if given.
inline Tensor kv_concat_self_attention(const Tensor& x, const std::optional<KvEntry>& prev,
                                       const SelfAttentionParams<double>& p, std::size_t heads = 1,
                                       KvEntry* current = nullptr) {
  const Tensor tokens = as_tokens(x);
  const Tensor q = p.q(tokens);
  Tensor k = p.k(tokens), v = p.v(tokens);
  if (current) *current = KvEntry{k, v};
  if (prev) {
    require(prev->k.rank() == 2 && prev->v.rank() == 2 && prev->k.dim(1) == k.dim(1) &&
                prev->v.dim(1) == v.dim(1) && prev->k.dim(0) == prev->v.dim(0),
            ErrorKind::kShape, "cached K/V do not match the current token width");
    k = concat_rows(k, prev->k);
    v = concat_rows(v, prev->v);
  }
  Tensor out = p.out(scaled_dot_attention(q, k, v, nullptr, heads));
  return out.reshaped(x.shape());
}

}  // namespace migc
