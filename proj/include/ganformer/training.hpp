#pragma once

// Adversarial training: non-saturating logistic losses, lazy R1, Adam, EMA.
//
// The R1 parameter gradient needs a mixed second derivative. With
// S(x) = sum of logits and g = dS/dx, the penalty P = c * |g|^2 has
// dP/dtheta = 2c * H_theta_x g, which is evaluated as a central difference
// of dS/dtheta along g: (dS/dtheta(x + eps g) - dS/dtheta(x - eps g)) / 2eps,
// with the activation pattern held fixed across both probes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ganformer/errors.hpp"
#include "ganformer/layers.hpp"
#include "ganformer/network.hpp"
#include "ganformer/rng.hpp"
#include "ganformer/tensor.hpp"
#include "json.hpp"

namespace ganformer {

struct TrainConfig {
  double learning_rate = 0.001;
  double mapping_lr_mul = 0.01;  // mapping network steps at learning_rate * mapping_lr_mul
  double beta1 = 0.0;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  std::size_t batch_size = 16;
  double r1_gamma = 10.0;
  std::size_t r1_interval = 16;
  double ema_decay = 0.999;
  double style_mix_prob = 0.9;
  std::size_t total_steps = 1000;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
    if (!(mapping_lr_mul > 0 && mapping_lr_mul <= 1)) throw ConfigError("mapping_lr_mul must lie in (0, 1]");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (minibatch stddev)");
    if (r1_gamma < 0) throw ConfigError("r1_gamma must be >= 0");
    if (r1_interval < 1) throw ConfigError("r1_interval must be >= 1");
    if (ema_decay < 0 || ema_decay > 1) throw ConfigError("ema_decay must lie in [0, 1]");
    if (style_mix_prob < 0 || style_mix_prob > 1) throw ConfigError("style_mix_prob must lie in [0, 1]");
  }
};

// --- losses -------------------------------------------------------------------

/// mean softplus(-fake)
template <typename T>
Tensor<T> g_loss(const Tensor<T>& fake_logits) {
  return mean(softplus(scale(fake_logits, T(-1))));
}

/// mean softplus(-real) + mean softplus(fake)
template <typename T>
Tensor<T> d_loss(const Tensor<T>& real_logits, const Tensor<T>& fake_logits) {
  return add(mean(softplus(scale(real_logits, T(-1)))), mean(softplus(fake_logits)));
}

template <typename T>
struct R1Result {
  double penalty = 0.0;       // gamma/2 * mean_b |dD/dx_b|^2
  std::vector<T> input_grad;  // d(sum of logits)/dx
};

/// `logits_fn` maps an image batch [B, ...] to logits [B].
template <typename T, typename F>
R1Result<T> r1_penalty(const Tensor<T>& reals, F&& logits_fn, double r1_gamma) {
  Tensor<T> x = reals.detach();
  x.set_requires_grad(true);
  const GradMap<T> grads = backward(sum(logits_fn(x)));
  R1Result<T> r;
  r.input_grad = grads.get(x).values();
  double sq = 0.0;
  for (const T v : r.input_grad) sq += static_cast<double>(v) * static_cast<double>(v);
  r.penalty = 0.5 * r1_gamma * sq / static_cast<double>(reals.extent(0));
  return r;
}

/// Gradient of `weight * penalty` w.r.t. every entry of `params`, given the
/// input gradient from r1_penalty. Returned in `params` order.
template <typename T, typename F>
std::vector<std::vector<T>> r1_parameter_gradient(const Tensor<T>& reals, const std::vector<T>& input_grad,
                                                  F&& logits_fn, const ParamList<T>& params, double r1_gamma,
                                                  double weight = 1.0) {
  std::vector<std::vector<T>> out;
  for (const auto& e : params) out.emplace_back(e.tensor->size(), T(0));
  double gmax = 0.0;
  for (const T v : input_grad) gmax = std::max(gmax, std::abs(static_cast<double>(v)));
  if (gmax == 0.0 || r1_gamma == 0.0) return out;
  // Probe step: the largest pixel moves by 1e-5 (64-bit) or 3e-3 (32-bit).
  // Minibatch stddev is sharply curved near equal items, so 32-bit results
  // carry errors near 1e-2; train_step therefore runs this in 64 bits.
  const double eps = (sizeof(T) >= 8 ? 1e-5 : 3e-3) / gmax;
  const double c = weight * r1_gamma / static_cast<double>(reals.extent(0));  // 2 * (gamma / 2B)

  // Freeze leaky_relu slopes at the unperturbed input; a probe crossing a
  // kink would otherwise add a jump of order 1/eps.
  SlopePattern pattern;
  {
    NoGradGuard no_grad;
    SlopePatternGuard rec(pattern, SlopePatternGuard::Mode::kRecord);
    logits_fn(reals);
  }
  auto param_grads = [&](double sign) {
    SlopePatternGuard replay(pattern, SlopePatternGuard::Mode::kReplay);
    std::vector<T> shifted = reals.values();
    for (std::size_t i = 0; i < shifted.size(); ++i)
      shifted[i] = static_cast<T>(static_cast<double>(shifted[i]) + sign * eps * static_cast<double>(input_grad[i]));
    const GradMap<T> g = backward(sum(logits_fn(Tensor<T>(reals.shape(), std::move(shifted)))));
    std::vector<std::vector<T>> result;
    for (const auto& e : params) {
      const auto view = g.view(*e.tensor);
      result.emplace_back(view.begin(), view.end());
      result.back().resize(e.tensor->size(), T(0));
    }
    return result;
  };
  const auto plus = param_grads(1.0);
  const auto minus = param_grads(-1.0);
  for (std::size_t p = 0; p < out.size(); ++p)
    for (std::size_t i = 0; i < out[p].size(); ++i)
      out[p][i] = static_cast<T>(c * (static_cast<double>(plus[p][i]) - static_cast<double>(minus[p][i])) / (2 * eps));
  return out;
}

// --- optimizer ----------------------------------------------------------------

template <typename T>
struct AdamMoments {
  std::vector<T> m, v;
};

/// Bias-corrected Adam update of `param` in place; t counts from 1.
template <typename T>
void adam_step(Tensor<T>& param, std::span<const T> grad, AdamMoments<T>& moments, std::uint64_t t,
               const TrainConfig& cfg, double lr_scale = 1.0) {
  if (t == 0) throw UsageError("adam_step needs t >= 1");
  const std::size_t n = param.size();
  if (grad.size() != n) {
    throw DimensionError("gradient of length " + std::to_string(grad.size()) + " for parameter " +
                         shape_string(param.shape()));
  }
  if (moments.m.empty()) moments.m.assign(n, T(0));
  if (moments.v.empty()) moments.v.assign(n, T(0));
  if (moments.m.size() != n || moments.v.size() != n) throw DimensionError("Adam moments do not match parameter");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  auto p = param.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    const double m = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
    const double v = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
    moments.m[i] = static_cast<T>(m);
    moments.v[i] = static_cast<T>(v);
    p[i] = static_cast<T>(p[i] - lr_scale * cfg.learning_rate * (m / c1) / (std::sqrt(v / c2) + cfg.adam_eps));
  }
}

/// ema <- decay * ema + (1 - decay) * params, entry by entry.
template <typename T>
void ema_update(const ParamList<T>& ema, const ParamList<T>& params, double decay) {
  if (ema.size() != params.size()) throw DimensionError("EMA and parameter lists differ in length");
  for (std::size_t k = 0; k < ema.size(); ++k) {
    Tensor<T>& e = *ema.entries()[k].tensor;
    const Tensor<T>& p = *params.entries()[k].tensor;
    if (e.shape() != p.shape()) {
      throw DimensionError("EMA " + ema.entries()[k].name + " " + shape_string(e.shape()) + " vs " +
                           shape_string(p.shape()));
    }
    auto ev = e.mutable_data();
    const auto pv = p.data();
    for (std::size_t i = 0; i < ev.size(); ++i)
      ev[i] = static_cast<T>(decay * static_cast<double>(ev[i]) + (1.0 - decay) * static_cast<double>(pv[i]));
  }
}

// --- state and step -----------------------------------------------------------

struct TrainState {
  GeneratorConfig net;
  TrainConfig train;
  GeneratorParams<float> g;
  DiscriminatorParams<float> d;
  GeneratorParams<float> g_ema;
  std::vector<AdamMoments<float>> g_adam, d_adam;
  std::uint64_t step = 0;
  Rng rng;

  ParamList<float> g_params() {
    ParamList<float> l;
    g.collect(l, "g");
    return l;
  }
  ParamList<float> d_params() {
    ParamList<float> l;
    d.collect(l, "d");
    return l;
  }
  ParamList<float> ema_params() {
    ParamList<float> l;
    g_ema.collect(l, "g");
    return l;
  }
};

inline TrainState make_train_state(const GeneratorConfig& net, const TrainConfig& train) {
  net.validate();
  train.validate();
  TrainState s;
  s.net = net;
  s.train = train;
  auto nets = init_params<float>(net, train.seed);
  s.g = std::move(nets.generator);
  s.d = std::move(nets.discriminator);
  s.g_ema = clone_parameters(s.g);
  for (const auto& e : s.g_params()) s.g_adam.push_back({std::vector<float>(e.tensor->size()), std::vector<float>(e.tensor->size())});
  for (const auto& e : s.d_params()) s.d_adam.push_back({std::vector<float>(e.tensor->size()), std::vector<float>(e.tensor->size())});
  s.rng = Rng(derive_seed(train.seed, 3));
  return s;
}

struct LogRecord {
  std::uint64_t step = 0;
  double g_loss = 0.0;
  double d_loss = 0.0;
  std::optional<double> r1;  // applied penalty (already scaled by the interval)
  double g_grad_norm = 0.0;
  double d_grad_norm = 0.0;
};

inline nlohmann::json to_json(const LogRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["g_loss"] = r.g_loss;
  j["d_loss"] = r.d_loss;
  j["r1"] = r.r1 ? nlohmann::json(*r.r1) : nlohmann::json(nullptr);
  j["g_grad_norm"] = r.g_grad_norm;
  j["d_grad_norm"] = r.d_grad_norm;
  return j;
}

inline Tensor<float> sample_z(Rng& rng, std::size_t batch, const GeneratorConfig& net) {
  std::vector<float> v(batch * net.num_latents * net.latent_dim);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor<float>({batch, net.num_latents * net.latent_dim}, std::move(v));
}

/// Per-level mapped latents for a fresh batch, style-mixed with probability
/// style_mix_prob at a crossover drawn uniformly from [1, levels - 1].
inline std::vector<Tensor<float>> sample_level_latents(TrainState& s, const GeneratorParams<float>& g,
                                                       std::size_t batch) {
  const Tensor<float> za = sample_z(s.rng, batch, s.net);
  const std::size_t L = s.net.levels();
  if (L > 1 && s.rng.uniform() < s.train.style_mix_prob) {
    const Tensor<float> zb = sample_z(s.rng, batch, s.net);
    const std::size_t crossover = 1 + s.rng.below(L - 1);
    return style_mix(za, zb, crossover, g, s.net);
  }
  return std::vector<Tensor<float>>(L, mapping_forward(za, g, s.net));
}

namespace detail {

inline double grad_norm(const std::vector<std::vector<float>>& grads) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (const float v : g) sq += static_cast<double>(v) * v;
  return std::sqrt(sq);
}

inline std::vector<std::vector<float>> gather(const GradMap<float>& grads, const ParamList<float>& params) {
  std::vector<std::vector<float>> out;
  for (const auto& e : params) {
    const auto view = grads.view(*e.tensor);
    out.emplace_back(view.begin(), view.end());
    out.back().resize(e.tensor->size(), 0.0f);
  }
  return out;
}

inline void require_finite(double value, const char* what, std::uint64_t step) {
  if (!std::isfinite(value)) {
    throw NumericalError(std::string(what) + " is not finite at step " + std::to_string(step));
  }
}

}  // namespace detail

inline bool r1_due(const TrainState& s) { return s.step % s.train.r1_interval == 0; }

/// One discriminator update (with lazy R1 on schedule), one generator update
/// and an EMA update.
inline LogRecord train_step(TrainState& s, const Tensor<float>& reals) {
  const std::size_t B = reals.extent(0);
  if (reals.rank() != 4 || reals.extent(1) != 3 || reals.extent(2) != s.net.resolution ||
      reals.extent(3) != s.net.resolution) {
    throw DimensionError("real batch " + shape_string(reals.shape()) + " does not match resolution " +
                         std::to_string(s.net.resolution));
  }
  LogRecord rec;
  rec.step = s.step;
  const std::uint64_t t = s.step + 1;
  ParamList<float> gp = s.g_params();
  ParamList<float> dp = s.d_params();
  auto logits_fn = [&](const Tensor<float>& x) { return discriminator_forward(x, s.d, s.net); };

  // Discriminator.
  {
    Tensor<float> fakes;
    {
      NoGradGuard guard;
      fakes = synthesis_forward(sample_level_latents(s, s.g, B), s.g, s.net).image;
    }
    const Tensor<float> loss = d_loss(logits_fn(reals), logits_fn(fakes));
    rec.d_loss = loss.item();
    detail::require_finite(rec.d_loss, "d_loss", s.step);
    auto grads = detail::gather(backward(loss), dp);
    if (r1_due(s) && s.train.r1_gamma > 0) {
      // Evaluated on a 64-bit copy of D for an accurate mixed derivative.
      Rng unused(0);
      auto d64 = convert_parameters(s.d, init_discriminator<double>(s.net, unused));
      ParamList<double> dp64;
      d64.collect(dp64, "d");
      auto fn64 = [&](const Tensor<double>& x) { return discriminator_forward(x, d64, s.net); };
      const Tensor<double> reals64 = cast<double>(reals.detach());
      const auto r1 = r1_penalty(reals64, fn64, s.train.r1_gamma);
      rec.r1 = r1.penalty * static_cast<double>(s.train.r1_interval);
      detail::require_finite(r1.penalty, "r1", s.step);
      const auto extra = r1_parameter_gradient(reals64, r1.input_grad, fn64, dp64, s.train.r1_gamma,
                                               static_cast<double>(s.train.r1_interval));
      for (std::size_t p = 0; p < grads.size(); ++p)
        for (std::size_t i = 0; i < grads[p].size(); ++i) grads[p][i] += static_cast<float>(extra[p][i]);
    }
    rec.d_grad_norm = detail::grad_norm(grads);
    for (std::size_t p = 0; p < dp.size(); ++p) adam_step(*dp.entries()[p].tensor, std::span<const float>(grads[p]), s.d_adam[p], t, s.train);
  }

  // Generator, with the discriminator frozen.
  {
    dp.set_requires_grad(false);
    const Tensor<float> fakes = synthesis_forward(sample_level_latents(s, s.g, B), s.g, s.net).image;
    const Tensor<float> loss = g_loss(logits_fn(fakes));
    rec.g_loss = loss.item();
    detail::require_finite(rec.g_loss, "g_loss", s.step);
    const auto grads = detail::gather(backward(loss), gp);
    dp.set_requires_grad(true);
    rec.g_grad_norm = detail::grad_norm(grads);
    for (std::size_t p = 0; p < gp.size(); ++p) {
      const bool mapping = gp.entries()[p].name.starts_with("g.mapping");
      adam_step(*gp.entries()[p].tensor, std::span<const float>(grads[p]), s.g_adam[p], t, s.train,
                mapping ? s.train.mapping_lr_mul : 1.0);
    }
  }

  ema_update(s.ema_params(), gp, s.train.ema_decay);
  ++s.step;
  return rec;
}

/// Deterministic batch indices for a given step, so runs resume exactly.
inline std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::size_t batch, std::uint64_t seed,
                                              std::uint64_t step) {
  if (dataset_size == 0) throw UsageError("empty dataset");
  Rng rng(derive_seed(seed ^ 0x5eedba7c4ULL, step));
  std::vector<std::size_t> idx(batch);
  for (auto& i : idx) i = rng.below(dataset_size);
  return idx;
}

/// Stacks [3, R, R] images into a [B, 3, R, R] batch.
inline Tensor<float> make_batch(const std::vector<Tensor<float>>& images, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw UsageError("empty batch");
  const Shape& item = images.at(indices[0]).shape();
  std::vector<float> data;
  data.reserve(indices.size() * shape_size(item));
  for (const std::size_t i : indices) {
    const auto& img = images.at(i);
    if (img.shape() != item) throw DimensionError("dataset images differ in shape");
    data.insert(data.end(), img.data().begin(), img.data().end());
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), item.begin(), item.end());
  return Tensor<float>(std::move(shape), std::move(data));
}

}  // namespace ganformer
