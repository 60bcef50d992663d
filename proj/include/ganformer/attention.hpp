#pragma once

// Bipartite attention between a grid of image features X (n = H*W elements)
// and a small set of latents Y (m elements).
//
//   a(X, Y)   = Attention(q(X), k(Y), v(Y))
//   simplex:  X <- gamma(a(X,Y)) * norm(X) + beta(a(X,Y))
//   additive: Y <- LayerNorm(Y + a(Y, X))
//   duplex:   Y <- additive(Y, X); K = a(Y, X) (centroids);
//             X <- gamma(A(q(X), K, v(Y))) * norm(X) + beta(A(q(X), K, v(Y)))
//
// Cost is O(n*m*d) per layer. Features and latents may carry an optional
// leading batch axis: features [B?, n, d], latent values [B?, m, d].

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ganformer/errors.hpp"
#include "ganformer/layers.hpp"
#include "ganformer/rng.hpp"
#include "ganformer/tensor.hpp"

namespace ganformer {

enum class AttentionVariant { kSimplex, kDuplex, kAdditive };

inline std::string_view to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::kSimplex:
      return "simplex";
    case AttentionVariant::kDuplex:
      return "duplex";
    case AttentionVariant::kAdditive:
      return "additive";
  }
  return "?";
}

inline AttentionVariant parse_variant(std::string_view text) {
  if (text == "simplex") return AttentionVariant::kSimplex;
  if (text == "duplex") return AttentionVariant::kDuplex;
  if (text == "additive") return AttentionVariant::kAdditive;
  throw ConfigError("unknown attention variant '" + std::string(text) + "'");
}

/// Fixed 2-D sinusoidal encodings, [H*W, d]. Channels [0, d/2) encode the
/// column, [d/2, d) the row, each as interleaved (sin, cos) pairs at
/// frequencies 10000^(-2f/(d/2)).
template <typename T>
Tensor<T> build_positional_encodings(std::size_t height, std::size_t width, std::size_t dim) {
  if (dim == 0 || dim % 4 != 0) {
    throw ConfigError("positional encoding dimension must be a positive multiple of 4, got " + std::to_string(dim));
  }
  const std::size_t half = dim / 2;
  std::vector<T> enc(height * width * dim);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      T* row = enc.data() + (y * width + x) * dim;
      for (std::size_t f = 0; f < half / 2; ++f) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(f) / static_cast<double>(half));
        row[2 * f] = static_cast<T>(std::sin(static_cast<double>(x) * freq));
        row[2 * f + 1] = static_cast<T>(std::cos(static_cast<double>(x) * freq));
        row[half + 2 * f] = static_cast<T>(std::sin(static_cast<double>(y) * freq));
        row[half + 2 * f + 1] = static_cast<T>(std::cos(static_cast<double>(y) * freq));
      }
    }
  }
  return Tensor<T>({height * width, dim}, std::move(enc));
}

template <typename T>
struct FeatureGrid {
  Tensor<T> features;  // [B?, n, d]
  std::size_t height = 0;
  std::size_t width = 0;
  Tensor<T> grid_encoding;  // [n, d]

  static FeatureGrid make(Tensor<T> features, std::size_t height, std::size_t width) {
    if (features.rank() < 2 || features.extent(-2) != height * width) {
      throw DimensionError("feature grid " + shape_string(features.shape()) + " does not hold " +
                           std::to_string(height) + "x" + std::to_string(width) + " positions");
    }
    FeatureGrid g;
    g.grid_encoding = build_positional_encodings<T>(height, width, features.extent(-1));
    g.features = std::move(features);
    g.height = height;
    g.width = width;
    return g;
  }

  /// Same grid geometry with new feature values.
  FeatureGrid with_features(Tensor<T> f) const {
    FeatureGrid g = *this;
    g.features = std::move(f);
    return g;
  }

  std::size_t positions() const { return height * width; }
  std::size_t dim() const { return features.extent(-1); }
};

template <typename T>
struct LatentSet {
  Tensor<T> values;               // [B?, m, d]
  std::optional<Tensor<T>> keys;  // duplex centroids, same shape as values
  Tensor<T> pos_embed;            // [m, d], trained

  std::size_t count() const { return values.extent(-2); }
  std::size_t dim() const { return values.extent(-1); }
};

template <typename T>
struct AttentionParams {
  Affine<T> query, key, value;
  Affine<T> scale;  // gamma
  Affine<T> shift;  // beta
  std::size_t heads = 1;
  AttentionVariant variant = AttentionVariant::kSimplex;

  std::size_t dim() const { return query.out_dim(); }

  void collect(ParamList<T>& params, const std::string& prefix) {
    params.add(prefix + ".query", query);
    params.add(prefix + ".key", key);
    params.add(prefix + ".value", value);
    params.add(prefix + ".scale", scale);
    params.add(prefix + ".shift", shift);
  }
};

template <typename T>
AttentionParams<T> make_attention_params(std::size_t dim, std::size_t heads, AttentionVariant variant, Rng& rng) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("head count " + std::to_string(heads) + " must divide dimension " + std::to_string(dim));
  }
  AttentionParams<T> p;
  p.query = make_affine<T>(dim, dim, rng);
  p.key = make_affine<T>(dim, dim, rng);
  p.value = make_affine<T>(dim, dim, rng);
  p.scale = make_affine<T>(dim, dim, rng, 1.0, T(1));
  p.shift = make_affine<T>(dim, dim, rng, 1.0, T(0));
  p.heads = heads;
  p.variant = variant;
  return p;
}

template <typename T>
struct AttentionResult {
  Tensor<T> output;   // [B?, a, d]
  Tensor<T> weights;  // [B?, h, a, b], rows sum to 1; not differentiable
};

/// Analytic multiply-accumulate counts for one attention call with `a`
/// queries, `b` keys and model dimension d (all heads together).
inline std::uint64_t attention_core_macs(std::size_t a, std::size_t b, std::size_t d) {
  return 2ULL * a * b * d;
}

/// Multi-head softmax(Q K^T / sqrt(d/h)) V over contiguous channel blocks.
///
/// Reductions over the key axis run in a content-defined order (keys sorted
/// by their head-block K and V rows), so permuting the keys permutes the
/// weight columns and leaves the output bit-identical.
template <typename T>
AttentionResult<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                        std::size_t heads = 1) {
  if (q.rank() < 2 || k.rank() != q.rank() || v.shape() != k.shape()) {
    throw DimensionError("attention operand shapes " + shape_string(q.shape()) + ", " + shape_string(k.shape()) +
                         ", " + shape_string(v.shape()));
  }
  const std::size_t d = q.extent(-1);
  if (k.extent(-1) != d) {
    throw DimensionError("query dim " + std::to_string(d) + " != key dim " + std::to_string(k.extent(-1)));
  }
  if (!std::equal(q.shape().begin(), q.shape().end() - 2, k.shape().begin())) {
    throw DimensionError("attention batch mismatch: " + shape_string(q.shape()) + " vs " + shape_string(k.shape()));
  }
  if (heads == 0 || d % heads != 0) throw DimensionError("heads must divide the model dimension");
  const std::size_t a = q.extent(-2);
  const std::size_t b = k.extent(-2);
  const std::size_t batch = q.size() / (a * d);
  const std::size_t dh = d / heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));

  const T* Q = q.data().data();
  const T* K = k.data().data();
  const T* V = v.data().data();
  std::vector<T> out(batch * a * d, T(0));
  std::vector<T> weights(batch * heads * a * b);
  auto orders = std::make_shared<std::vector<std::size_t>>(batch * heads * b);
  std::vector<T> scores(b);

  for (std::size_t bt = 0; bt < batch; ++bt) {
    const T* Kb = K + bt * b * d;
    const T* Vb = V + bt * b * d;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dh;
      std::size_t* order = orders->data() + (bt * heads + h) * b;
      for (std::size_t j = 0; j < b; ++j) order[j] = j;
      std::sort(order, order + b, [&](std::size_t x, std::size_t y) {
        const T* kx = Kb + x * d + c0;
        const T* ky = Kb + y * d + c0;
        for (std::size_t c = 0; c < dh; ++c)
          if (kx[c] != ky[c]) return kx[c] < ky[c];
        const T* vx = Vb + x * d + c0;
        const T* vy = Vb + y * d + c0;
        for (std::size_t c = 0; c < dh; ++c)
          if (vx[c] != vy[c]) return vx[c] < vy[c];
        return false;
      });
      for (std::size_t i = 0; i < a; ++i) {
        const T* qi = Q + (bt * a + i) * d + c0;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < b; ++j) {
          const T* kj = Kb + j * d + c0;
          T s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv_scale;
          mx = std::max(mx, scores[j]);
        }
        T total = 0;
        for (std::size_t j = 0; j < b; ++j) scores[j] = std::exp(scores[j] - mx);
        for (std::size_t t = 0; t < b; ++t) total += scores[order[t]];
        T* w = weights.data() + ((bt * heads + h) * a + i) * b;
        for (std::size_t j = 0; j < b; ++j) w[j] = scores[j] / total;
        T* acc = out.data() + (bt * a + i) * d + c0;
        for (std::size_t t = 0; t < b; ++t) {
          const std::size_t j = order[t];
          const T wj = w[j];
          const T* vj = Vb + j * d + c0;
          for (std::size_t c = 0; c < dh; ++c) acc[c] += wj * vj[c];
        }
      }
    }
  }
  {
    MacScope scope(MacCounter::Category::kAttention);
    mac_counter().charge_matmul(batch * attention_core_macs(a, b, d));
  }

  Shape weight_shape(q.shape().begin(), q.shape().end() - 2);
  weight_shape.insert(weight_shape.end(), {heads, a, b});
  Tensor<T> weight_tensor(weight_shape, weights);
  auto saved_w = std::make_shared<std::vector<T>>(std::move(weights));
  auto qn = q.node();
  auto kn = k.node();
  auto vn = v.node();
  Tensor<T> output = detail::record<T>(
      q.shape(), std::move(out), {&q, &k, &v},
      [qn, kn, vn, saved_w, batch, heads, a, b, d, dh, inv_scale](detail::Node<T>& self) {
        std::vector<T> dw(b);
        T* gq = qn->requires_grad ? qn->grad_buffer().data() : nullptr;
        T* gk = kn->requires_grad ? kn->grad_buffer().data() : nullptr;
        T* gv = vn->requires_grad ? vn->grad_buffer().data() : nullptr;
        for (std::size_t bt = 0; bt < batch; ++bt) {
          const T* Kb = kn->data.data() + bt * b * d;
          const T* Vb = vn->data.data() + bt * b * d;
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < a; ++i) {
              const T* w = saved_w->data() + ((bt * heads + h) * a + i) * b;
              const T* go = self.grad.data() + (bt * a + i) * d + c0;
              const T* qi = qn->data.data() + (bt * a + i) * d + c0;
              T dot = 0;
              for (std::size_t j = 0; j < b; ++j) {
                const T* vj = Vb + j * d + c0;
                T s = 0;
                for (std::size_t c = 0; c < dh; ++c) s += go[c] * vj[c];
                dw[j] = s;
                dot += w[j] * s;
              }
              for (std::size_t j = 0; j < b; ++j) {
                const T ds = w[j] * (dw[j] - dot) * inv_scale;
                if (gq) {
                  T* g = gq + (bt * a + i) * d + c0;
                  const T* kj = Kb + j * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) g[c] += ds * kj[c];
                }
                if (gk) {
                  T* g = gk + (bt * b + j) * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) g[c] += ds * qi[c];
                }
                if (gv) {
                  T* g = gv + (bt * b + j) * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) g[c] += w[j] * go[c];
                }
              }
            }
          }
        }
      },
      "scaled_dot_attention");
  return {std::move(output), std::move(weight_tensor)};
}

/// Mean over the head axis of [.., h, a, b] weights.
template <typename T>
Tensor<T> head_mean(const Tensor<T>& weights) {
  const std::size_t h = weights.extent(-3);
  const std::size_t ab = weights.extent(-2) * weights.extent(-1);
  const std::size_t outer = weights.size() / (h * ab);
  Shape shape(weights.shape().begin(), weights.shape().end() - 3);
  shape.push_back(weights.extent(-2));
  shape.push_back(weights.extent(-1));
  std::vector<T> out(outer * ab, T(0));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < h; ++k)
      for (std::size_t i = 0; i < ab; ++i) out[o * ab + i] += weights.data()[(o * h + k) * ab + i];
  for (auto& v : out) v /= static_cast<T>(h);
  return Tensor<T>(std::move(shape), std::move(out));
}

namespace detail {

template <typename T>
void check_attention_dims(const FeatureGrid<T>& xf, const LatentSet<T>& ys, const AttentionParams<T>& p) {
  if (xf.dim() != ys.dim() || xf.dim() != p.dim() || ys.pos_embed.shape() != Shape{ys.count(), ys.dim()}) {
    throw DimensionError("bipartite attention dims: features " + shape_string(xf.features.shape()) + ", latents " +
                         shape_string(ys.values.shape()) + ", pos_embed " + shape_string(ys.pos_embed.shape()) +
                         ", maps " + std::to_string(p.dim()));
  }
}

template <typename T>
void require_variant(const AttentionParams<T>& p, AttentionVariant expected, const char* op) {
  if (p.variant != expected) {
    throw UsageError(std::string(op) + " requires " + std::string(to_string(expected)) + " parameters, got " +
                     std::string(to_string(p.variant)));
  }
}

/// gamma(message) * norm(X) + beta(message)
template <typename T>
Tensor<T> modulate(const Tensor<T>& features, const Tensor<T>& message, const AttentionParams<T>& p) {
  return add(mul(p.scale(message), channel_norm(features)), p.shift(message));
}

}  // namespace detail

/// a(X, Y): features query the latents. Positional encodings are added to
/// both sides before the q/k/v maps.
template <typename T>
AttentionResult<T> bipartite_attend(const FeatureGrid<T>& xf, const LatentSet<T>& ys, const AttentionParams<T>& p) {
  detail::check_attention_dims(xf, ys, p);
  const Tensor<T> xp = add(xf.features, xf.grid_encoding);
  const Tensor<T> yp = add(ys.values, ys.pos_embed);
  return scaled_dot_attention(p.query(xp), p.key(yp), p.value(yp), p.heads);
}

/// a(Y, X): latents query the features.
template <typename T>
AttentionResult<T> latent_attend(const LatentSet<T>& ys, const FeatureGrid<T>& xf, const AttentionParams<T>& p) {
  detail::check_attention_dims(xf, ys, p);
  const Tensor<T> xp = add(xf.features, xf.grid_encoding);
  const Tensor<T> yp = add(ys.values, ys.pos_embed);
  return scaled_dot_attention(p.query(yp), p.key(xp), p.value(xp), p.heads);
}

/// Self-attention reference (Y = X), used to contrast cost scaling.
template <typename T>
AttentionResult<T> self_attend(const FeatureGrid<T>& xf, const AttentionParams<T>& p) {
  LatentSet<T> same{xf.features, std::nullopt, xf.grid_encoding};
  return bipartite_attend(xf, same, p);
}

template <typename T>
struct FeatureUpdate {
  FeatureGrid<T> grid;
  Tensor<T> weights;  // [B?, h, n, m]
};

template <typename T>
FeatureUpdate<T> simplex_update_with_weights(const FeatureGrid<T>& xf, const LatentSet<T>& ys,
                                             const AttentionParams<T>& p) {
  detail::require_variant(p, AttentionVariant::kSimplex, "simplex_update");
  auto att = bipartite_attend(xf, ys, p);
  return {xf.with_features(detail::modulate(xf.features, att.output, p)), std::move(att.weights)};
}

template <typename T>
FeatureGrid<T> simplex_update(const FeatureGrid<T>& xf, const LatentSet<T>& ys, const AttentionParams<T>& p) {
  return simplex_update_with_weights(xf, ys, p).grid;
}

/// Y <- LayerNorm(Y + a(Y, X)); invalidates centroid keys.
template <typename T>
LatentSet<T> additive_update(const LatentSet<T>& ys, const FeatureGrid<T>& xf, const AttentionParams<T>& p) {
  detail::require_variant(p, AttentionVariant::kAdditive, "additive_update");
  auto att = latent_attend(ys, xf, p);
  LatentSet<T> out{channel_norm(add(ys.values, att.output)), std::nullopt, ys.pos_embed};
  return out;
}

/// K = a(Y, X): per latent, the attention-weighted average of the v-mapped
/// features. Stored into `ys.keys` and returned.
template <typename T>
Tensor<T> compute_centroids(LatentSet<T>& ys, const FeatureGrid<T>& xf, const AttentionParams<T>& p) {
  auto att = latent_attend(ys, xf, p);
  ys.keys = att.output;
  return att.output;
}

template <typename T>
FeatureUpdate<T> duplex_update_with_weights(const FeatureGrid<T>& xf, const LatentSet<T>& ys,
                                            const AttentionParams<T>& p) {
  detail::require_variant(p, AttentionVariant::kDuplex, "duplex_update");
  if (!ys.keys) throw StateError("duplex_update needs centroids; call compute_centroids first");
  detail::check_attention_dims(xf, ys, p);
  if (ys.keys->shape() != ys.values.shape()) {
    throw DimensionError("centroids " + shape_string(ys.keys->shape()) + " vs values " +
                         shape_string(ys.values.shape()));
  }
  const Tensor<T> xp = add(xf.features, xf.grid_encoding);
  const Tensor<T> yp = add(ys.values, ys.pos_embed);
  auto att = scaled_dot_attention(p.query(xp), *ys.keys, p.value(yp), p.heads);
  return {xf.with_features(detail::modulate(xf.features, att.output, p)), std::move(att.weights)};
}

template <typename T>
FeatureGrid<T> duplex_update(const FeatureGrid<T>& xf, const LatentSet<T>& ys, const AttentionParams<T>& p) {
  return duplex_update_with_weights(xf, ys, p).grid;
}

/// Parameters of one bipartite layer. `latent` drives the latent-side stage
/// of duplex layers (the additive update and the centroids) and is unused by
/// simplex layers.
template <typename T>
struct BipartiteLayerParams {
  AttentionParams<T> feature;
  std::optional<AttentionParams<T>> latent;

  AttentionVariant variant() const { return feature.variant; }

  void collect(ParamList<T>& params, const std::string& prefix) {
    feature.collect(params, prefix + ".feature");
    if (latent) latent->collect(params, prefix + ".latent");
  }
};

template <typename T>
BipartiteLayerParams<T> make_bipartite_layer_params(std::size_t dim, std::size_t heads, AttentionVariant variant,
                                                    Rng& rng) {
  if (variant == AttentionVariant::kAdditive) {
    throw ConfigError("a bipartite layer is either simplex or duplex");
  }
  BipartiteLayerParams<T> p;
  p.feature = make_attention_params<T>(dim, heads, variant, rng);
  if (variant == AttentionVariant::kDuplex) {
    p.latent = make_attention_params<T>(dim, heads, AttentionVariant::kAdditive, rng);
  }
  return p;
}

template <typename T>
struct LayerOutput {
  FeatureGrid<T> features;
  LatentSet<T> latents;
  Tensor<T> weights;  // head-mean of the feature-update stage, [B?, n, m]
};

/// simplex: X <- u_s(X, Y).
/// duplex:  Y <- u_a(Y, X); K <- a(Y, X); X <- u_d(X, Y).
template <typename T>
LayerOutput<T> bipartite_layer(const FeatureGrid<T>& xf, const LatentSet<T>& ys, const BipartiteLayerParams<T>& p) {
  if (p.variant() == AttentionVariant::kSimplex) {
    auto upd = simplex_update_with_weights(xf, ys, p.feature);
    return {std::move(upd.grid), ys, head_mean(upd.weights)};
  }
  if (p.variant() != AttentionVariant::kDuplex || !p.latent) {
    throw UsageError("bipartite_layer requires simplex or duplex parameters");
  }
  LatentSet<T> updated = additive_update(ys, xf, *p.latent);
  compute_centroids(updated, xf, *p.latent);
  auto upd = duplex_update_with_weights(xf, updated, p.feature);
  return {std::move(upd.grid), std::move(updated), head_mean(upd.weights)};
}

}  // namespace ganformer
