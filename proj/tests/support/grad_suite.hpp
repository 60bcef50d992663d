#pragma once

// The finite-difference gradient suite: one entry per differentiable
// operation or composite, each run on 20 random instances. Shared by the
// unit tests and the acceptance binary so both check the same cases.

#include <algorithm>
#include <functional>
#include <string>
#include <type_traits>
#include <vector>

#include "ganformer/attention.hpp"
#include "ganformer/network.hpp"
#include "support/gradcheck.hpp"

namespace ganformer::testing {

struct GradCaseResult {
  double worst32 = 0;
  double worst64 = 0;
  std::size_t instances = 0;
};

struct GradCase {
  std::string name;
  std::function<GradCaseResult(std::size_t instances)> run;
};

inline constexpr std::size_t kGradInstances = 20;
inline constexpr double kGradTolerance32 = 1e-3;
inline constexpr double kGradTolerance64 = 1e-5;

namespace suite_detail {

template <typename F>
GradCase make_case(std::string name, std::vector<Shape> shapes, F f, std::uint64_t seed_base,
                   std::size_t max_coords = 0, double scale = 1.0, std::vector<Tensor<double>> offsets = {}) {
  return {std::move(name), [=](std::size_t instances) {
            GradCaseResult r;
            for (std::uint64_t seed = 0; seed < instances; ++seed) {
              Rng rng(seed_base + seed);
              auto inputs = random_tensors(shapes, rng, scale);
              for (std::size_t t = 0; t < offsets.size() && t < inputs.size(); ++t) {
                if (offsets[t].defined()) inputs[t] = add(inputs[t], offsets[t]);
              }
              GradCheckOptions opts;
              opts.max_coords = max_coords;
              opts.seed = seed;
              r.worst32 = std::max(r.worst32, check_gradients<float>(f, inputs, opts).max_rel_error);
              r.worst64 = std::max(r.worst64, check_gradients<double>(f, inputs, opts).max_rel_error);
              ++r.instances;
            }
            return r;
          }};
}

template <typename U>
using In = std::vector<Tensor<U>>;

#define GANFORMER_GRAD_OP(NAME, SEED, SHAPES, EXPR)                                   \
  make_case(NAME, SHAPES, [](const auto& in) {                                        \
    using U = typename std::decay_t<decltype(in)>::value_type::value_type;            \
    (void)sizeof(U);                                                                  \
    EXPR;                                                                             \
  }, SEED)

template <typename U>
Tensor<U> layer_probe(const In<U>& in, AttentionVariant variant) {
  Rng rng(77);
  auto p = make_bipartite_layer_params<U>(8, 2, variant, rng);
  ParamList<U> list;
  p.collect(list, "layer");
  std::size_t i = 3;
  for (const auto& e : list) *e.tensor = in[i++];
  const auto xf = FeatureGrid<U>::make(in[0], 4, 4);
  const LatentSet<U> ys{in[1], std::nullopt, in[2]};
  const auto out = bipartite_layer(xf, ys, p);
  return add(probe(out.features.features, 5), probe(out.latents.values, 6));
}

}  // namespace suite_detail

/// 8 px, k = 2, d = 8, two heads, attention on both levels.
inline GeneratorConfig grad_suite_net(AttentionVariant variant) {
  GeneratorConfig c;
  c.resolution = 8;
  c.num_latents = 2;
  c.latent_dim = 8;
  c.variant = variant;
  c.attn_first_level = 0;
  c.attn_last_level = 1;
  c.heads = 2;
  c.channel_base = 4;
  c.channel_max = 8;
  return c;
}

template <typename U>
Tensor<U> generator_probe(const std::vector<Tensor<U>>& in, const GeneratorConfig& c) {
  Rng rng(21);
  auto g = init_generator<U>(c, rng);
  ParamList<U> list;
  g.collect(list);
  std::size_t i = 1;
  for (const auto& e : list) *e.tensor = in[i++];
  return probe(generator_forward(in[0], g, c).image);
}

template <typename U>
Tensor<U> discriminator_probe(const std::vector<Tensor<U>>& in, const GeneratorConfig& c) {
  Rng rng(22);
  auto d = init_discriminator<U>(c, rng);
  ParamList<U> list;
  d.collect(list);
  std::size_t i = 1;
  for (const auto& e : list) *e.tensor = in[i++];
  return probe(discriminator_forward(in[0], d, c));
}

inline std::vector<GradCase> gradient_suite() {
  using namespace suite_detail;
  using S = std::vector<Shape>;
  std::vector<GradCase> cases{
      GANFORMER_GRAD_OP("add_broadcast", 100, (S{{3, 4}, {4}}), return probe(add(in[0], in[1]))),
      GANFORMER_GRAD_OP("sub", 120, (S{{2, 5}, {2, 5}}), return probe(sub(in[0], in[1]))),
      GANFORMER_GRAD_OP("mul_broadcast", 140, (S{{2, 3, 4}, {3, 4}}), return probe(mul(in[0], in[1]))),
      GANFORMER_GRAD_OP("scale_add_scalar", 160, (S{{2, 6}}), return probe(add_scalar(scale(in[0], U(1.5)), U(1)))),
      GANFORMER_GRAD_OP("matmul", 180, (S{{2, 3, 4}, {2, 4, 5}}), return probe(matmul(in[0], in[1]))),
      GANFORMER_GRAD_OP("matmul_nt", 200, (S{{3, 4}, {6, 4}}), return probe(matmul(in[0], in[1], true))),
      GANFORMER_GRAD_OP("transpose_last2", 220, (S{{2, 3, 4}}), return probe(transpose_last2(in[0]))),
      GANFORMER_GRAD_OP("linear", 240, (S{{2, 3, 5}, {4, 5}, {4}}), return probe(linear(in[0], in[1], in[2], U(0.7)))),
      GANFORMER_GRAD_OP("softmax_last", 260, (S{{3, 5}}), return probe(softmax(in[0], -1))),
      GANFORMER_GRAD_OP("softmax_mid", 280, (S{{2, 4, 3}}), return probe(softmax(in[0], 1))),
      GANFORMER_GRAD_OP("conv3x3", 300, (S{{2, 2, 5, 4}, {3, 2, 3, 3}, {3}}), return probe(conv2d(in[0], in[1], in[2]))),
      GANFORMER_GRAD_OP("conv1x1", 320, (S{{2, 3, 4, 4}, {2, 3, 1, 1}, {2}}), return probe(conv2d(in[0], in[1], in[2]))),
      GANFORMER_GRAD_OP("upsample", 340, (S{{2, 2, 3, 4}}), return probe(resize_bilinear(in[0], Resize::kUp2))),
      GANFORMER_GRAD_OP("downsample", 360, (S{{2, 2, 4, 6}}), return probe(resize_bilinear(in[0], Resize::kDown2))),
      GANFORMER_GRAD_OP("leaky_relu", 380, (S{{4, 5}}), return probe(leaky_relu(in[0], U(0.2)))),
      GANFORMER_GRAD_OP("channel_norm", 400, (S{{3, 6}}), return probe(channel_norm(in[0]))),
      GANFORMER_GRAD_OP("tanh", 420, (S{{7}}), return probe(tanh(in[0]))),
      GANFORMER_GRAD_OP("softplus", 440, (S{{7}}), return probe(softplus(scale(in[0], U(3))))),
      GANFORMER_GRAD_OP("sum_mean", 460, (S{{3, 4}}), return add(sum(mul(in[0], in[0])), mean(tanh(in[0])))),
      GANFORMER_GRAD_OP("permute", 480, (S{{2, 3, 4}}), return probe(permute(in[0], {2, 0, 1}))),
      GANFORMER_GRAD_OP("reshape", 500, (S{{2, 6}}), return probe(reshape(add_scalar(in[0], U(1)), {3, 4}))),
      GANFORMER_GRAD_OP("channel_scale", 520, (S{{2, 3, 2, 2}, {3}}), return probe(channel_scale(in[0], in[1]))),
      GANFORMER_GRAD_OP("minibatch_stddev", 540, (S{{3, 2, 2, 3}}), return probe(minibatch_stddev(in[0]))),
      GANFORMER_GRAD_OP("scaled_dot_attention_h1", 560, (S{{2, 5, 4}, {2, 3, 4}, {2, 3, 4}}),
                        return probe(scaled_dot_attention(in[0], in[1], in[2], 1).output)),
      GANFORMER_GRAD_OP("scaled_dot_attention_h2", 580, (S{{2, 5, 4}, {2, 3, 4}, {2, 3, 4}}),
                        return probe(scaled_dot_attention(in[0], in[1], in[2], 2).output)),
  };

  for (const auto variant : {AttentionVariant::kSimplex, AttentionVariant::kDuplex}) {
    Rng shapes_rng(77);
    auto p = make_bipartite_layer_params<double>(8, 2, variant, shapes_rng);
    ParamList<double> list;
    p.collect(list, "layer");
    S shapes{{16, 8}, {2, 8}, {2, 8}};
    for (const auto& e : list) shapes.push_back(e.tensor->shape());
    cases.push_back(make_case("bipartite_layer_" + std::string(to_string(variant)), shapes,
                              [variant](const auto& in) { return layer_probe(in, variant); }, 800, 12));
  }

  // Parameters sit near their initial values plus a perturbation, so the
  // pass exercises realistic activations.
  for (const auto variant : {AttentionVariant::kSimplex, AttentionVariant::kDuplex}) {
    const auto c = grad_suite_net(variant);
    Rng init_rng(21);
    auto g = init_generator<double>(c, init_rng);
    ParamList<double> list;
    g.collect(list);
    S shapes{{2, 16}};
    std::vector<Tensor<double>> offsets{Tensor<double>()};
    for (const auto& e : list) {
      shapes.push_back(e.tensor->shape());
      offsets.push_back(e.tensor->detach());
    }
    cases.push_back(make_case("generator_8px_" + std::string(to_string(variant)), shapes,
                              [c](const auto& in) { return generator_probe(in, c); }, 900, 4, 0.3, offsets));
  }

  {
    const auto c = grad_suite_net(AttentionVariant::kDuplex);
    Rng init_rng(22);
    auto d = init_discriminator<double>(c, init_rng);
    ParamList<double> list;
    d.collect(list);
    S shapes{{3, 3, 8, 8}};
    for (const auto& e : list) shapes.push_back(e.tensor->shape());
    cases.push_back(make_case("discriminator_8px", shapes, [c](const auto& in) { return discriminator_probe(in, c); },
                              950, 4));
  }
  return cases;
}

#undef GANFORMER_GRAD_OP

}  // namespace ganformer::testing
