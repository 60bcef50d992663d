#pragma once

// Generator (mapping network + synthesis stack with bipartite attention) and
// discriminator.
//
// Generator: z [B, k*w] -> k rows -> shared MLP -> latents [B, k, w].
// Synthesis starts from a learned 4x4 constant; every level runs
//   [bipartite layer] -> conv3x3 -> leaky ReLU -> [upsample]
// with a ResNet skip (main + skip) / sqrt(2), then a final 1x1 toRGB and tanh.
// Discriminator: fromRGB -> per level [conv3x3, lrelu, downsample, skip]
// -> minibatch stddev -> conv3x3 -> flatten -> affine logit.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ganformer/attention.hpp"
#include "ganformer/errors.hpp"
#include "ganformer/layers.hpp"
#include "ganformer/rng.hpp"
#include "ganformer/tensor.hpp"

namespace ganformer {

struct GeneratorConfig {
  std::size_t resolution = 32;
  std::size_t num_latents = 16;  // k
  std::size_t latent_dim = 32;   // per component
  std::size_t mapping_depth = 8;
  AttentionVariant variant = AttentionVariant::kDuplex;
  // Attention runs at levels first..last inclusive; last < first disables it.
  int attn_first_level = 0;
  int attn_last_level = 3;
  std::size_t heads = 1;
  bool resnet = true;
  bool noise_inputs = false;
  bool discriminator_attention = false;
  std::size_t channel_base = 32;
  std::size_t channel_max = 256;

  std::size_t levels() const {
    std::size_t l = 0;
    while ((std::size_t{4} << l) < resolution) ++l;
    return l + 1;
  }
  std::size_t level_resolution(std::size_t level) const { return std::size_t{4} << level; }

  /// Output channels of synthesis level `level`: min(max, base * 2^(levels - level)).
  std::size_t channels(std::size_t level) const {
    const std::size_t shift = levels() - level;
    std::size_t c = channel_base;
    for (std::size_t i = 0; i < shift && c < channel_max; ++i) c *= 2;
    return std::min(c, channel_max);
  }
  /// Input channels of a level; level 0 reads the learned constant.
  std::size_t input_channels(std::size_t level) const { return channels(level == 0 ? 0 : level - 1); }

  bool has_attention(std::size_t level) const {
    return attn_last_level >= attn_first_level && static_cast<int>(level) >= attn_first_level &&
           static_cast<int>(level) <= attn_last_level;
  }

  void validate() const {
    if (resolution < 8 || (resolution & (resolution - 1)) != 0) {
      throw ConfigError("resolution must be a power of two >= 8, got " + std::to_string(resolution));
    }
    if (num_latents == 0) throw ConfigError("num_latents must be >= 1");
    if (latent_dim == 0) throw ConfigError("latent_dim must be >= 1");
    if (mapping_depth == 0) throw ConfigError("mapping_depth must be >= 1");
    if (heads == 0) throw ConfigError("heads must be >= 1");
    if (channel_base == 0 || channel_max == 0) throw ConfigError("channel counts must be positive");
    if (variant == AttentionVariant::kAdditive) throw ConfigError("generator attention is simplex or duplex");
    if (attn_last_level >= attn_first_level) {
      if (attn_first_level < 0 || attn_last_level >= static_cast<int>(levels())) {
        throw ConfigError("attention levels [" + std::to_string(attn_first_level) + ", " +
                          std::to_string(attn_last_level) + "] outside [0, " + std::to_string(levels() - 1) + "]");
      }
    }
    auto check = [&](std::size_t level, std::size_t c, const char* where) {
      if (c % 4 != 0 || c % heads != 0) {
        throw ConfigError(std::string(where) + " level " + std::to_string(level) + " has " + std::to_string(c) +
                          " channels; attention needs a multiple of 4 divisible by heads");
      }
    };
    for (std::size_t l = 0; l < levels(); ++l) {
      if (has_attention(l)) check(l, input_channels(l), "synthesis");
      if (discriminator_attention && l > 0) check(l, channels(l), "discriminator");
    }
  }
};

template <typename T>
struct SynthesisLevel {
  std::optional<BipartiteLayerParams<T>> attention;
  Tensor<T> pos_embed;                   // [k, C_in]
  std::optional<Affine<T>> source_proj;  // latent_dim -> C_in
  std::optional<Affine<T>> carry_proj;   // previous level's C_in -> C_in (duplex)
  Conv<T> conv;
  std::optional<Conv<T>> skip;           // 1x1 when channels change
  Tensor<T> noise_strength;              // [C_out], only with noise inputs
  Tensor<T> grid_encoding;               // fixed, not a parameter
};

template <typename T>
struct GeneratorParams {
  std::vector<Affine<T>> mapping;
  Tensor<T> constant;  // [C0, 4, 4]
  std::vector<SynthesisLevel<T>> levels;
  Conv<T> to_rgb;

  void collect(ParamList<T>& params, const std::string& prefix = "g") {
    for (std::size_t i = 0; i < mapping.size(); ++i) params.add(prefix + ".mapping" + std::to_string(i), mapping[i]);
    params.add(prefix + ".constant", constant);
    for (std::size_t l = 0; l < levels.size(); ++l) {
      auto& lv = levels[l];
      const std::string p = prefix + ".level" + std::to_string(l);
      if (lv.attention) {
        lv.attention->collect(params, p + ".attention");
        params.add(p + ".pos_embed", lv.pos_embed);
      }
      if (lv.source_proj) params.add(p + ".source_proj", *lv.source_proj);
      if (lv.carry_proj) params.add(p + ".carry_proj", *lv.carry_proj);
      params.add(p + ".conv", lv.conv);
      if (lv.skip) params.add(p + ".skip", *lv.skip);
      if (lv.noise_strength.defined()) params.add(p + ".noise_strength", lv.noise_strength);
    }
    params.add(prefix + ".to_rgb", to_rgb);
  }
};

template <typename T>
struct DiscriminatorLevel {
  Conv<T> conv;
  std::optional<Conv<T>> skip;
  std::optional<BipartiteLayerParams<T>> attention;
  Tensor<T> latents;    // learned [k, C], only with attention
  Tensor<T> pos_embed;  // [k, C]
  Tensor<T> grid_encoding;
};

template <typename T>
struct DiscriminatorParams {
  Conv<T> from_rgb;
  std::vector<DiscriminatorLevel<T>> levels;
  Conv<T> final_conv;
  Affine<T> output;

  void collect(ParamList<T>& params, const std::string& prefix = "d") {
    params.add(prefix + ".from_rgb", from_rgb);
    for (std::size_t i = 0; i < levels.size(); ++i) {
      auto& lv = levels[i];
      const std::string p = prefix + ".level" + std::to_string(i);
      params.add(p + ".conv", lv.conv);
      if (lv.skip) params.add(p + ".skip", *lv.skip);
      if (lv.attention) {
        lv.attention->collect(params, p + ".attention");
        params.add(p + ".latents", lv.latents);
        params.add(p + ".pos_embed", lv.pos_embed);
      }
    }
    params.add(prefix + ".final_conv", final_conv);
    params.add(prefix + ".output", output);
  }
};

template <typename T>
struct Networks {
  GeneratorParams<T> generator;
  DiscriminatorParams<T> discriminator;
};

template <typename T>
Tensor<T> normal_parameter(Shape shape, Rng& rng) {
  std::vector<T> v(shape_size(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal());
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

template <typename T>
GeneratorParams<T> init_generator(const GeneratorConfig& cfg, Rng& rng) {
  cfg.validate();
  GeneratorParams<T> g;
  for (std::size_t i = 0; i < cfg.mapping_depth; ++i) {
    const bool last = i + 1 == cfg.mapping_depth;
    g.mapping.push_back(make_affine<T>(cfg.latent_dim, cfg.latent_dim, rng, last ? 1.0 : kLeakyGain));
  }
  g.constant = normal_parameter<T>({cfg.channels(0), 4, 4}, rng);
  for (std::size_t l = 0; l < cfg.levels(); ++l) {
    SynthesisLevel<T> lv;
    const std::size_t cin = cfg.input_channels(l), cout = cfg.channels(l);
    const std::size_t res = cfg.level_resolution(l);
    if (cfg.has_attention(l)) {
      lv.attention = make_bipartite_layer_params<T>(cin, cfg.heads, cfg.variant, rng);
      lv.pos_embed = normal_parameter<T>({cfg.num_latents, cin}, rng);
      lv.source_proj = make_affine<T>(cfg.latent_dim, cin, rng);
      if (cfg.variant == AttentionVariant::kDuplex && l > 0 && cfg.has_attention(l - 1)) {
        lv.carry_proj = make_affine<T>(cfg.input_channels(l - 1), cin, rng);
      }
      lv.grid_encoding = build_positional_encodings<T>(res, res, cin);
    }
    lv.conv = make_conv<T>(cin, cout, 3, rng);
    if (cin != cout) lv.skip = make_conv<T>(cin, cout, 1, rng, 1.0);
    if (cfg.noise_inputs) lv.noise_strength = constant_parameter<T>({cout}, T(0));
    g.levels.push_back(std::move(lv));
  }
  g.to_rgb = make_conv<T>(cfg.channels(cfg.levels() - 1), 3, 1, rng, 1.0);
  return g;
}

template <typename T>
DiscriminatorParams<T> init_discriminator(const GeneratorConfig& cfg, Rng& rng) {
  cfg.validate();
  DiscriminatorParams<T> d;
  const std::size_t L = cfg.levels();
  d.from_rgb = make_conv<T>(3, cfg.channels(L - 1), 1, rng);
  // Resolution R down to 8, mirroring the synthesis channel schedule.
  for (std::size_t l = L - 1; l >= 1; --l) {
    DiscriminatorLevel<T> lv;
    const std::size_t cin = cfg.channels(l), cout = cfg.channels(l - 1);
    const std::size_t res = cfg.level_resolution(l);
    if (cfg.discriminator_attention) {
      lv.attention = make_bipartite_layer_params<T>(cin, cfg.heads, AttentionVariant::kSimplex, rng);
      lv.latents = normal_parameter<T>({cfg.num_latents, cin}, rng);
      lv.pos_embed = normal_parameter<T>({cfg.num_latents, cin}, rng);
      lv.grid_encoding = build_positional_encodings<T>(res, res, cin);
    }
    lv.conv = make_conv<T>(cin, cout, 3, rng);
    if (cin != cout) lv.skip = make_conv<T>(cin, cout, 1, rng, 1.0);
    d.levels.push_back(std::move(lv));
  }
  d.final_conv = make_conv<T>(cfg.channels(0) + 1, cfg.channels(0), 3, rng);
  d.output = make_affine<T>(cfg.channels(0) * 16, 1, rng);
  return d;
}

/// Generator and discriminator drawn from independent streams of `seed`.
template <typename T>
Networks<T> init_params(const GeneratorConfig& cfg, std::uint64_t seed) {
  Rng g_rng(derive_seed(seed, 1));
  Rng d_rng(derive_seed(seed, 2));
  return {init_generator<T>(cfg, g_rng), init_discriminator<T>(cfg, d_rng)};
}

/// Deep copy with fresh parameter leaves (e.g. for the EMA generator).
template <template <typename> class P, typename T>
P<T> clone_parameters(const P<T>& params) {
  P<T> copy = params;
  ParamList<T> list;
  copy.collect(list);
  for (const auto& e : list) *e.tensor = Tensor<T>::parameter(e.tensor->shape(), e.tensor->values());
  return copy;
}

/// Copies values into `shell`, a structure of the same architecture at
/// another precision.
template <template <typename> class P, typename To, typename From>
P<To> convert_parameters(const P<From>& params, P<To> shell) {
  P<From> view = params;  // shares tensor storage; collect needs mutable handles
  ParamList<From> src;
  view.collect(src);
  ParamList<To> dst;
  shell.collect(dst);
  if (src.size() != dst.size()) throw DimensionError("convert_parameters: architectures differ");
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Tensor<From>& a = *src.entries()[i].tensor;
    if (a.shape() != dst.entries()[i].tensor->shape()) {
      throw DimensionError("convert_parameters: " + src.entries()[i].name + " differs in shape");
    }
    std::vector<To> v(a.data().begin(), a.data().end());
    *dst.entries()[i].tensor = Tensor<To>::parameter(a.shape(), std::move(v));
  }
  return shell;
}

/// z [.., k*w] -> latents [.., k, w] through the shared MLP.
template <typename T>
Tensor<T> mapping_forward(const Tensor<T>& z, const GeneratorParams<T>& g, const GeneratorConfig& cfg) {
  const std::size_t kw = cfg.num_latents * cfg.latent_dim;
  if (z.rank() == 0 || z.extent(-1) != kw) {
    throw DimensionError("z " + shape_string(z.shape()) + " must end in k*w = " + std::to_string(kw));
  }
  Shape rows(z.shape().begin(), z.shape().end() - 1);
  rows.push_back(cfg.num_latents);
  rows.push_back(cfg.latent_dim);
  Tensor<T> y = reshape(z, rows);
  for (std::size_t i = 0; i < g.mapping.size(); ++i) {
    y = g.mapping[i](y);
    if (i + 1 < g.mapping.size()) y = leaky_relu(y);
  }
  return y;
}

/// Per-level mapped latents: levels below `crossover` use z_a, the rest z_b.
template <typename T>
std::vector<Tensor<T>> style_mix(const Tensor<T>& z_a, const Tensor<T>& z_b, std::size_t crossover,
                                 const GeneratorParams<T>& g, const GeneratorConfig& cfg) {
  const std::size_t L = cfg.levels();
  if (crossover > L) {
    throw UsageError("crossover " + std::to_string(crossover) + " outside [0, " + std::to_string(L) + "]");
  }
  const Tensor<T> wa = crossover > 0 ? mapping_forward(z_a, g, cfg) : Tensor<T>();
  const Tensor<T> wb = crossover < L ? mapping_forward(z_b, g, cfg) : Tensor<T>();
  std::vector<Tensor<T>> per_level;
  for (std::size_t l = 0; l < L; ++l) per_level.push_back(l < crossover ? wa : wb);
  return per_level;
}

namespace detail {

/// [B, C, H, W] <-> [B, H*W, C]
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  const std::size_t B = x.extent(0), C = x.extent(1), n = x.extent(2) * x.extent(3);
  return permute(reshape(x, {B, C, n}), {0, 2, 1});
}

template <typename T>
Tensor<T> from_tokens(const Tensor<T>& t, std::size_t h, std::size_t w) {
  const std::size_t B = t.extent(0), C = t.extent(2);
  return reshape(permute(t, {0, 2, 1}), {B, C, h, w});
}

template <typename T>
Tensor<T> residual(const Tensor<T>& main, const Tensor<T>& skip) {
  return scale(add(main, skip), static_cast<T>(1.0 / std::numbers::sqrt2));
}

}  // namespace detail

template <typename T>
struct BlockOutput {
  Tensor<T> features;               // [B, C_out, r', r']
  std::optional<LatentSet<T>> latents;  // after the attention layer
  Tensor<T> weights;                // [B, n, k] head-mean, when attention ran
};

/// One synthesis level. `latents` must already be in the level's input
/// dimension when the level has attention.
template <typename T>
BlockOutput<T> synthesis_block(const Tensor<T>& x, const std::optional<LatentSet<T>>& latents, std::size_t level,
                               const GeneratorParams<T>& g, const GeneratorConfig& cfg, Rng* noise_rng = nullptr) {
  if (level >= cfg.levels()) throw UsageError("synthesis level " + std::to_string(level) + " out of range");
  const auto& lv = g.levels[level];
  const std::size_t res = cfg.level_resolution(level);
  if (x.rank() != 4 || x.extent(1) != cfg.input_channels(level) || x.extent(2) != res || x.extent(3) != res) {
    throw DimensionError("level " + std::to_string(level) + " input " + shape_string(x.shape()));
  }
  BlockOutput<T> out;
  Tensor<T> h = x;
  if (lv.attention) {
    if (!latents) throw UsageError("attention level " + std::to_string(level) + " needs latents");
    const FeatureGrid<T> grid{detail::to_tokens(x), res, res, lv.grid_encoding};
    auto layer = bipartite_layer(grid, *latents, *lv.attention);
    h = detail::from_tokens(layer.features.features, res, res);
    out.latents = std::move(layer.latents);
    out.weights = std::move(layer.weights);
  }
  h = lv.conv(h);
  if (cfg.noise_inputs && lv.noise_strength.defined()) {
    if (!noise_rng) throw UsageError("noise inputs enabled but no noise source given");
    const std::size_t B = h.extent(0), C = h.extent(1), n = res * res;
    std::vector<T> noise(B * C * n);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < n; ++i) {
        const T v = static_cast<T>(noise_rng->normal());
        for (std::size_t c = 0; c < C; ++c) noise[(b * C + c) * n + i] = v;
      }
    h = add(h, channel_scale(Tensor<T>(h.shape(), std::move(noise)), lv.noise_strength));
  }
  h = leaky_relu(h);
  const bool last = level + 1 == cfg.levels();
  if (!last) h = resize_bilinear(h, Resize::kUp2);
  if (cfg.resnet) {
    Tensor<T> s = lv.skip ? (*lv.skip)(x) : x;
    if (!last) s = resize_bilinear(s, Resize::kUp2);
    h = detail::residual(h, s);
  }
  out.features = std::move(h);
  return out;
}

template <typename T>
struct GeneratorOutput {
  Tensor<T> image;                     // [B, 3, R, R] (or [3, R, R] for unbatched z)
  std::vector<Tensor<T>> attention;    // per attention level, [B, n, k]
  std::vector<std::size_t> attention_levels;
};

/// Synthesis from per-level mapped latents, each [B, k, w].
template <typename T>
GeneratorOutput<T> synthesis_forward(const std::vector<Tensor<T>>& level_latents, const GeneratorParams<T>& g,
                                     const GeneratorConfig& cfg, Rng* noise_rng = nullptr) {
  const std::size_t L = cfg.levels();
  if (level_latents.size() != L) throw UsageError("expected one latent tensor per synthesis level");
  const std::size_t B = level_latents[0].extent(0);
  Tensor<T> x = add(Tensor<T>({B, cfg.channels(0), 4, 4}, T(0)), g.constant);
  GeneratorOutput<T> out;
  std::optional<LatentSet<T>> carried;
  for (std::size_t l = 0; l < L; ++l) {
    const auto& lv = g.levels[l];
    std::optional<LatentSet<T>> ys;
    if (lv.attention) {
      Tensor<T> values = (*lv.source_proj)(level_latents[l]);
      if (lv.carry_proj && carried) values = add(values, (*lv.carry_proj)(carried->values));
      ys = LatentSet<T>{std::move(values), std::nullopt, lv.pos_embed};
    }
    auto block = synthesis_block(x, ys, l, g, cfg, noise_rng);
    x = std::move(block.features);
    carried = std::move(block.latents);
    if (lv.attention) {
      out.attention.push_back(std::move(block.weights));
      out.attention_levels.push_back(l);
    }
  }
  out.image = tanh(g.to_rgb(x));
  return out;
}

/// z [B, k*w] or [k*w] -> image [B?, 3, R, R].
template <typename T>
GeneratorOutput<T> generator_forward(const Tensor<T>& z, const GeneratorParams<T>& g, const GeneratorConfig& cfg,
                                     Rng* noise_rng = nullptr) {
  const bool unbatched = z.rank() == 1;
  const Tensor<T> zb = unbatched ? reshape(z, {1, z.extent(0)}) : z;
  const Tensor<T> w = mapping_forward(zb, g, cfg);
  auto out = synthesis_forward(std::vector<Tensor<T>>(cfg.levels(), w), g, cfg, noise_rng);
  if (unbatched) {
    const std::size_t R = cfg.resolution;
    out.image = reshape(out.image, {3, R, R});
    for (auto& a : out.attention) a = reshape(a, {a.extent(1), a.extent(2)});
  }
  return out;
}

/// Per-item logits [B] for images [B, 3, R, R].
template <typename T>
Tensor<T> discriminator_forward(const Tensor<T>& image, const DiscriminatorParams<T>& d, const GeneratorConfig& cfg) {
  const std::size_t R = cfg.resolution;
  if (image.rank() != 4 || image.extent(1) != 3 || image.extent(2) != R || image.extent(3) != R) {
    throw DimensionError("discriminator expects [B,3," + std::to_string(R) + "," + std::to_string(R) + "], got " +
                         shape_string(image.shape()));
  }
  const std::size_t B = image.extent(0);
  Tensor<T> x = leaky_relu(d.from_rgb(image));
  std::size_t res = R;
  for (const auto& lv : d.levels) {
    Tensor<T> h = x;
    if (lv.attention) {
      const FeatureGrid<T> grid{detail::to_tokens(x), res, res, lv.grid_encoding};
      const LatentSet<T> ys{add(Tensor<T>({B, lv.latents.extent(0), lv.latents.extent(1)}, T(0)), lv.latents),
                            std::nullopt, lv.pos_embed};
      h = detail::from_tokens(bipartite_layer(grid, ys, *lv.attention).features.features, res, res);
    }
    h = resize_bilinear(leaky_relu(lv.conv(h)), Resize::kDown2);
    if (cfg.resnet) h = detail::residual(h, resize_bilinear(lv.skip ? (*lv.skip)(x) : x, Resize::kDown2));
    x = std::move(h);
    res /= 2;
  }
  x = leaky_relu(d.final_conv(minibatch_stddev(x)));
  x = reshape(x, {B, x.size() / B});
  return reshape(d.output(x), {B});
}

}  // namespace ganformer
