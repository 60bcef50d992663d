#pragma once

// Glue shared by the command line and the acceptance suite: the training
// loop over an image set, generator sampling, and the metric report.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ganformer/evaluation.hpp"
#include "ganformer/network.hpp"
#include "ganformer/training.hpp"
#include "json.hpp"

namespace ganformer {

struct TrainHooks {
  std::function<void(const LogRecord&)> on_log;
  std::function<void(TrainState&)> on_checkpoint;
  std::size_t log_every = 1;
  std::size_t checkpoint_every = 0;  // 0 disables
};

/// Trains until `state.step == until_step`; batches depend only on (seed, step).
inline void run_training(TrainState& state, const std::vector<Tensor<float>>& data, std::uint64_t until_step,
                         const TrainHooks& hooks = {}) {
  if (data.empty()) throw UsageError("training set is empty");
  while (state.step < until_step) {
    const auto idx = batch_indices(data.size(), state.train.batch_size, state.train.seed, state.step);
    const LogRecord rec = train_step(state, make_batch(data, idx));
    if (hooks.on_log && (rec.step % hooks.log_every == 0 || state.step == until_step)) hooks.on_log(rec);
    if (hooks.on_checkpoint && hooks.checkpoint_every && state.step % hooks.checkpoint_every == 0)
      hooks.on_checkpoint(state);
  }
}

struct GeneratedSamples {
  std::vector<Tensor<float>> images;             // [3, R, R] each
  std::vector<std::vector<AttentionMap>> attention;  // per image, per attention level
  std::vector<std::size_t> attention_levels;
};

/// n images from z ~ N(0, I) drawn from `seed`, in batches of `batch`.
inline GeneratedSamples sample_generator(const GeneratorParams<float>& g, const GeneratorConfig& net, std::size_t n,
                                         std::uint64_t seed, bool with_attention = false, std::size_t batch = 32) {
  NoGradGuard no_grad;
  Rng rng(derive_seed(seed, 0x5a3b1e));
  Rng noise(derive_seed(seed, 0x0f5e));
  GeneratedSamples out;
  const std::size_t R = net.resolution;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t b = std::min(batch, n - start);
    const Tensor<float> z = sample_z(rng, b, net);
    const auto gen = generator_forward(z, g, net, net.noise_inputs ? &noise : nullptr);
    const auto pixels = gen.image.data();
    for (std::size_t i = 0; i < b; ++i) {
      std::vector<float> v(pixels.begin() + static_cast<long>(i * 3 * R * R),
                           pixels.begin() + static_cast<long>((i + 1) * 3 * R * R));
      out.images.emplace_back(Shape{3, R, R}, std::move(v));
      if (!with_attention) continue;
      std::vector<AttentionMap> maps;
      for (std::size_t a = 0; a < gen.attention.size(); ++a) {
        const auto& w = gen.attention[a];  // [b, n, k]
        const std::size_t side = net.level_resolution(gen.attention_levels[a]);
        const std::size_t per = w.extent(1) * w.extent(2);
        AttentionMap m{side, side, w.extent(2), {}};
        m.weights.assign(w.data().begin() + static_cast<long>(i * per), w.data().begin() + static_cast<long>((i + 1) * per));
        maps.push_back(std::move(m));
      }
      out.attention.push_back(std::move(maps));
    }
    out.attention_levels = gen.attention_levels;
  }
  return out;
}

struct EvalOptions {
  std::size_t samples = 1000;
  std::size_t iou_samples = 200;
  std::uint64_t embedder_seed = 1234;
  std::uint64_t sample_seed = 99;
};

struct EvalReport {
  double fed = 0;
  PrecisionRecall pr;
  ChiSquareReport chi2;
  IouSummary iou;
  std::size_t n_samples = 0;
  std::uint64_t embedder_seed = 0;
};

inline SceneStatistics detection_statistics(const std::vector<Tensor<float>>& images) {
  SceneStatistics stats;
  for (const auto& img : images) stats.add(detect_objects(img));
  return stats;
}

/// Compares generator samples with the first `opts.samples` real images.
inline EvalReport evaluate_generator(const GeneratorParams<float>& g, const GeneratorConfig& net,
                                     const std::vector<Tensor<float>>& reals, const EvalOptions& opts) {
  if (reals.size() < opts.samples) {
    throw UsageError("evaluation needs " + std::to_string(opts.samples) + " real images, have " +
                     std::to_string(reals.size()));
  }
  const auto fakes = sample_generator(g, net, opts.samples, opts.sample_seed, false);
  const RandomEmbedder embedder(opts.embedder_seed);
  const std::vector<Tensor<float>> real_subset(reals.begin(), reals.begin() + static_cast<long>(opts.samples));
  const EmbeddingSet re = embedder.embed_all(real_subset), fe = embedder.embed_all(fakes.images);

  EvalReport r;
  r.n_samples = opts.samples;
  r.embedder_seed = opts.embedder_seed;
  r.fed = frechet_embed_distance(re, fe);
  r.pr = knn_precision_recall(re, fe);
  r.chi2 = chi_square_report(detection_statistics(fakes.images));
  if (opts.iou_samples && net.attn_last_level >= net.attn_first_level) {
    const auto seg = sample_generator(g, net, opts.iou_samples, opts.sample_seed + 1, true);
    for (std::size_t i = 0; i < seg.images.size(); ++i) r.iou.add(segment_scores(seg.attention[i], detect_objects(seg.images[i])));
  }
  return r;
}

inline nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["fed"] = number_or_null(r.fed);
  j["precision"] = r.pr.precision;
  j["recall"] = r.pr.recall;
  j["chi2"] = {{"count", number_or_null(r.chi2.count)},
               {"color", number_or_null(r.chi2.color)},
               {"shape", number_or_null(r.chi2.shape)},
               {"size", number_or_null(r.chi2.size)},
               {"cooccurrence", number_or_null(r.chi2.cooccurrence)}};
  j["iou"] = {{"circle", r.iou.shape_mean(0)},
              {"square", r.iou.shape_mean(1)},
              {"triangle", r.iou.shape_mean(2)},
              {"background", r.iou.background_mean()},
              {"objects", r.iou.object_mean()}};
  j["n_samples"] = r.n_samples;
  j["embedder_seed"] = r.embedder_seed;
  return j;
}

}  // namespace ganformer
