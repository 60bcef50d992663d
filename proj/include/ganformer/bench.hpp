#pragma once

// Attention cost benchmark and the attention-range ablation sweep.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ganformer/attention.hpp"
#include "ganformer/experiment.hpp"
#include "json.hpp"

namespace ganformer {

enum class BenchKind { kBipartite, kSelf };

inline std::string_view to_string(BenchKind k) { return k == BenchKind::kBipartite ? "bipartite" : "self"; }

inline BenchKind parse_bench_kind(std::string_view s) {
  if (s == "bipartite") return BenchKind::kBipartite;
  if (s == "self") return BenchKind::kSelf;
  throw ConfigError("unknown attention kind '" + std::string(s) + "' (expected bipartite or self)");
}

namespace detail {
inline Tensor<float> gaussian(Shape shape, Rng& rng) {
  std::vector<float> v(shape_size(shape));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor<float>(std::move(shape), std::move(v));
}
}  // namespace detail

struct BenchRow {
  std::size_t n = 0;
  std::uint64_t attention_macs = 0;  // scores and weighted sums
  std::uint64_t total_macs = 0;      // plus q/k/v maps
  double seconds = 0;                // median of `repeats`
};

struct BenchReport {
  BenchKind kind = BenchKind::kBipartite;
  std::size_t m = 0, d = 0, heads = 0;
  std::vector<BenchRow> rows;
  double slope = 0;  // least-squares d log(time) / d log(n)
};

/// Least-squares slope of log y against log x.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw UsageError("slope needs two or more matching points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

/// Forward attention of n grid features against m latents (or against
/// themselves), counting MACs and timing the median of `repeats` runs.
inline BenchReport bench_attention(const std::vector<std::size_t>& n_list, std::size_t m, std::size_t d,
                                   std::size_t heads, BenchKind kind, std::size_t repeats = 5,
                                   std::uint64_t seed = 1) {
  if (!std::is_sorted(n_list.begin(), n_list.end())) throw UsageError("n values must be ascending");
  if (repeats == 0) throw UsageError("repeats must be positive");
  NoGradGuard no_grad;
  Rng rng(seed);
  const auto params = make_attention_params<float>(d, heads, AttentionVariant::kSimplex, rng);
  BenchReport report{kind, m, d, heads, {}, 0};
  LatentSet<float> ys{detail::gaussian({m, d}, rng), std::nullopt, detail::gaussian({m, d}, rng)};
  std::vector<double> xs, ts;
  for (const std::size_t n : n_list) {
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n))));
    const std::size_t w = side * side == n ? side : 1;
    const auto xf = FeatureGrid<float>::make(detail::gaussian({n, d}, rng), n / w, w);
    auto run = [&] {
      if (kind == BenchKind::kSelf) return self_attend(xf, params);
      return bipartite_attend(xf, ys, params);
    };
    BenchRow row{n, 0, 0, 0};
    mac_counter().reset();
    run();
    row.attention_macs = mac_counter().attention;
    row.total_macs = mac_counter().total();
    std::vector<double> times;
    for (std::size_t r = 0; r < repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      run();
      times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    std::nth_element(times.begin(), times.begin() + static_cast<long>(times.size() / 2), times.end());
    row.seconds = times[times.size() / 2];
    report.rows.push_back(row);
    xs.push_back(static_cast<double>(n));
    ts.push_back(row.seconds);
  }
  if (xs.size() >= 2) report.slope = loglog_slope(xs, ts);
  return report;
}

inline nlohmann::json to_json(const BenchReport& r) {
  nlohmann::json j{{"kind", to_string(r.kind)}, {"m", r.m}, {"d", r.d}, {"heads", r.heads}, {"slope", r.slope}};
  j["rows"] = nlohmann::json::array();
  for (const auto& row : r.rows) {
    j["rows"].push_back({{"n", row.n},
                         {"attention_macs", row.attention_macs},
                         {"total_macs", row.total_macs},
                         {"seconds", row.seconds}});
  }
  return j;
}

struct AblationCell {
  int first = 0, last = 0;
  bool skipped = false;  // first > last
  double g_loss = 0, d_loss = 0, fed = 0;
};

struct AblationReport {
  std::vector<AblationCell> cells;
  std::size_t steps = 0;
  std::uint64_t seed = 0;
};

/// Trains every (first, last) attention range from the same seed for the
/// configured step budget and scores the EMA generator.
inline AblationReport ablation_sweep(const GeneratorConfig& base, const TrainConfig& train,
                                     const std::vector<int>& first_levels, const std::vector<int>& last_levels,
                                     const std::vector<Tensor<float>>& data, const EvalOptions& eval) {
  AblationReport report{{}, train.total_steps, train.seed};
  const int top = static_cast<int>(base.levels()) - 1;
  for (const int f : first_levels) {
    for (const int l : last_levels) {
      if (f < 0 || l < 0 || f > top || l > top) {
        throw ConfigError("ablation levels must lie in [0, " + std::to_string(top) + "]");
      }
    }
  }
  for (const int f : first_levels) {
    for (const int l : last_levels) {
      AblationCell cell{f, l, f > l, 0, 0, 0};
      if (!cell.skipped) {
        GeneratorConfig net = base;
        net.attn_first_level = f;
        net.attn_last_level = l;
        TrainState state = make_train_state(net, train);
        LogRecord last{};
        run_training(state, data, train.total_steps, {[&](const LogRecord& r) { last = r; }, {}, 1, 0});
        cell.g_loss = last.g_loss;
        cell.d_loss = last.d_loss;
        EvalOptions opts = eval;
        opts.iou_samples = 0;
        cell.fed = evaluate_generator(state.g_ema, net, data, opts).fed;
      }
      report.cells.push_back(cell);
    }
  }
  return report;
}

inline nlohmann::json to_json(const AblationReport& r) {
  nlohmann::json j{{"steps", r.steps}, {"seed", r.seed}, {"cells", nlohmann::json::array()}};
  for (const auto& c : r.cells) {
    nlohmann::json cell{{"attn_first_level", c.first}, {"attn_last_level", c.last}, {"skipped", c.skipped}};
    if (!c.skipped) {
      cell["g_loss"] = c.g_loss;
      cell["d_loss"] = c.d_loss;
      cell["fed"] = number_or_null(c.fed);
    }
    j["cells"].push_back(std::move(cell));
  }
  return j;
}

}  // namespace ganformer
