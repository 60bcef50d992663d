// ganformer: dataset generation, training, sampling, attention export,
// evaluation, the attention benchmark and the attention-range ablation.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ganformer/bench.hpp"
#include "ganformer/checkpoint.hpp"
#include "ganformer/config.hpp"
#include "ganformer/experiment.hpp"
#include "ganformer/scene.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace ganformer;

namespace {

struct Options {
  std::string config_path;
  std::vector<std::string> settings;  // key=value
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> dataset;
  std::optional<std::size_t> steps;
  std::string checkpoint;
  std::size_t count = 16;
  std::size_t sample_index = 0;
  bool untrained = false;
  // bench
  std::vector<std::size_t> bench_n{256, 1024, 4096};
  std::size_t bench_m = 16, bench_d = 32, bench_heads = 1, bench_repeats = 5;
  std::string bench_kind = "both";
  // ablate
  std::vector<int> first_levels, last_levels;
};

RunConfig resolve(const Options& o) {
  RunConfig cfg = default_run_config();
  if (!o.config_path.empty()) cfg = parse_config(detail::read_file(o.config_path));
  for (const auto& kv : o.settings) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_setting(cfg, detail::trim(std::string_view(kv).substr(0, eq)), detail::trim(std::string_view(kv).substr(eq + 1)),
                  "--set " + kv);
  }
  if (o.out_dir) cfg.out_dir = *o.out_dir;
  if (o.seed) cfg.train.seed = *o.seed;
  if (o.dataset) cfg.dataset = *o.dataset;
  if (o.steps) cfg.train.total_steps = *o.steps;
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text)) throw IoError("cannot write " + path.string());
}

void echo_config(const RunConfig& cfg) { write_text(fs::path(cfg.out_dir) / "resolved.cfg", resolved_config(cfg)); }

fs::path checkpoint_path(const RunConfig& cfg, std::uint64_t step) {
  return fs::path(cfg.out_dir) / "checkpoints" / ("step" + std::to_string(step) + ".ckpt");
}

std::vector<Tensor<float>> training_images(const RunConfig& cfg) {
  Dataset data = load_dataset(cfg.dataset, cfg.dataset_limit);
  if (data.images.empty()) throw UsageError("dataset " + cfg.dataset + " holds no scenes");
  const std::size_t r = data.images.front().extent(1);
  if (r != cfg.net.resolution) {
    throw UsageError("dataset resolution " + std::to_string(r) + " does not match output_resolution " +
                     std::to_string(cfg.net.resolution));
  }
  return std::move(data.images);
}

/// The generator to sample from: the EMA weights of a checkpoint, or a fresh
/// initialization when --untrained is given.
TrainState generator_state(const RunConfig& cfg, const Options& o) {
  if (o.untrained) return make_train_state(cfg.net, cfg.train);
  if (o.checkpoint.empty()) throw UsageError("--checkpoint is required (or pass --untrained)");
  return checkpoint_load(o.checkpoint, cfg.net, cfg.train);
}

int cmd_gen_data(const RunConfig& cfg) {
  const auto lines = generate_dataset(cfg.dataset_size, cfg.train.seed, cfg.net.resolution, cfg.dataset);
  std::cout << "wrote " << lines.size() << " scenes to " << cfg.dataset << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, const Options& o) {
  const auto images = training_images(cfg);
  echo_config(cfg);
  TrainState state = o.checkpoint.empty() ? make_train_state(cfg.net, cfg.train)
                                          : checkpoint_load(o.checkpoint, cfg.net, cfg.train);
  const fs::path log_path = fs::path(cfg.out_dir) / "log.jsonl";
  std::ofstream log(log_path, state.step == 0 ? std::ios::trunc : std::ios::app);
  if (!log) throw IoError("cannot write " + log_path.string());
  TrainHooks hooks;
  hooks.log_every = cfg.log_every;
  hooks.checkpoint_every = cfg.checkpoint_every;
  hooks.on_log = [&](const LogRecord& r) { log << to_json(r).dump() << "\n" << std::flush; };
  hooks.on_checkpoint = [&](TrainState& s) { checkpoint_save(s, checkpoint_path(cfg, s.step)); };
  try {
    run_training(state, images, cfg.train.total_steps, hooks);
  } catch (const NumericalError& e) {
    log << nlohmann::json{{"step", state.step}, {"error", e.what()}}.dump() << "\n";
    throw;
  }
  const auto final_path = checkpoint_path(cfg, state.step);
  if (!fs::exists(final_path)) checkpoint_save(state, final_path);
  std::cout << "trained to step " << state.step << "; checkpoint " << final_path.string() << "\n";
  return 0;
}

int cmd_sample(const RunConfig& cfg, const Options& o) {
  TrainState state = generator_state(cfg, o);
  echo_config(cfg);
  const auto samples = sample_generator(state.g_ema, cfg.net, o.count, cfg.train.seed);
  char name[32];
  for (std::size_t i = 0; i < samples.images.size(); ++i) {
    std::snprintf(name, sizeof name, "sample_%06zu.ppm", i);
    save_ppm(samples.images[i], fs::path(cfg.out_dir) / "images" / name);
  }
  std::cout << "wrote " << samples.images.size() << " images\n";
  return 0;
}

int cmd_attmaps(const RunConfig& cfg, const Options& o) {
  TrainState state = generator_state(cfg, o);
  if (!(cfg.net.attn_last_level >= cfg.net.attn_first_level)) throw UsageError("attention is disabled in this config");
  echo_config(cfg);
  const auto samples = sample_generator(state.g_ema, cfg.net, o.sample_index + 1, cfg.train.seed, true);
  std::vector<std::pair<std::size_t, AttentionMap>> layers;
  for (std::size_t a = 0; a < samples.attention_levels.size(); ++a) {
    layers.emplace_back(samples.attention_levels[a], samples.attention[o.sample_index][a]);
  }
  const fs::path dir = fs::path(cfg.out_dir) / "attmaps";
  export_attention_maps(layers, dir);
  save_ppm(samples.images[o.sample_index], fs::path(cfg.out_dir) / "images" / "attmaps_sample.ppm");
  std::cout << "wrote attention maps for " << layers.size() << " layers to " << dir.string() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, const Options& o) {
  TrainState state = generator_state(cfg, o);
  const auto images = training_images(cfg);
  echo_config(cfg);
  EvalOptions opts;
  opts.samples = cfg.eval_samples;
  opts.embedder_seed = cfg.embedder_seed;
  opts.sample_seed = cfg.train.seed;
  const auto report = evaluate_generator(state.g_ema, cfg.net, images, opts);
  nlohmann::json j = to_json(report);
  j["step"] = state.step;
  write_text(fs::path(cfg.out_dir) / "metrics.json", j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_bench(const RunConfig& cfg, const Options& o) {
  std::vector<BenchKind> kinds;
  if (o.bench_kind == "both") {
    kinds = {BenchKind::kBipartite, BenchKind::kSelf};
  } else {
    kinds = {parse_bench_kind(o.bench_kind)};
  }
  nlohmann::json out = nlohmann::json::array();
  for (const auto kind : kinds) {
    const auto r = bench_attention(o.bench_n, o.bench_m, o.bench_d, o.bench_heads, kind, o.bench_repeats, cfg.train.seed);
    std::printf("%s (m=%zu d=%zu h=%zu)\n%10s %16s %16s %12s\n", std::string(to_string(kind)).c_str(), r.m, r.d,
                r.heads, "n", "attention_macs", "total_macs", "seconds");
    for (const auto& row : r.rows) {
      std::printf("%10zu %16llu %16llu %12.6f\n", row.n, static_cast<unsigned long long>(row.attention_macs),
                  static_cast<unsigned long long>(row.total_macs), row.seconds);
    }
    std::printf("log-log slope %.3f\n\n", r.slope);
    out.push_back(to_json(r));
  }
  write_text(fs::path(cfg.out_dir) / "bench.json", out.dump(2) + "\n");
  return 0;
}

int cmd_ablate(const RunConfig& cfg, const Options& o) {
  if (o.first_levels.empty() || o.last_levels.empty()) throw UsageError("--first and --last are required");
  const auto images = training_images(cfg);
  echo_config(cfg);
  EvalOptions opts;
  opts.samples = cfg.eval_samples;
  opts.embedder_seed = cfg.embedder_seed;
  opts.sample_seed = cfg.train.seed;
  const auto report = ablation_sweep(cfg.net, cfg.train, o.first_levels, o.last_levels, images, opts);
  const auto j = to_json(report);
  write_text(fs::path(cfg.out_dir) / "ablation.json", j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";
  return 0;
}

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config_path, "config file of key = value lines")->check(CLI::ExistingFile);
  cmd->add_option("--set", o.settings, "override one config key (key=value); repeatable");
  cmd->add_option("--out-dir", o.out_dir, "output directory");
  cmd->add_option("--seed", o.seed, "seed for data, initialization and sampling");
  cmd->add_option("--dataset", o.dataset, "dataset directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ganformer: bipartite-attention GAN laboratory"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "render a synthetic scene dataset");
  add_common(gen, o);
  auto* count_opt = gen->add_option("--count", o.count, "number of scenes (default: dataset_size)");

  auto* train = app.add_subcommand("train", "train a generator and discriminator");
  add_common(train, o);
  train->add_option("--steps", o.steps, "total training steps");
  train->add_option("--resume", o.checkpoint, "resume from a checkpoint")->check(CLI::ExistingFile);

  auto* sample = app.add_subcommand("sample", "write generated images");
  add_common(sample, o);
  sample->add_option("--checkpoint", o.checkpoint, "checkpoint to sample from")->check(CLI::ExistingFile);
  sample->add_flag("--untrained", o.untrained, "sample from a freshly initialized generator");
  sample->add_option("--count", o.count, "number of images");

  auto* att = app.add_subcommand("attmaps", "export per-layer attention maps of one sample");
  add_common(att, o);
  att->add_option("--checkpoint", o.checkpoint, "checkpoint to sample from")->check(CLI::ExistingFile);
  att->add_flag("--untrained", o.untrained, "use a freshly initialized generator");
  att->add_option("--index", o.sample_index, "sample index within the seeded stream");

  auto* eval = app.add_subcommand("eval", "score the EMA generator against the dataset");
  add_common(eval, o);
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate")->check(CLI::ExistingFile);
  eval->add_flag("--untrained", o.untrained, "evaluate a freshly initialized generator");

  auto* bench = app.add_subcommand("bench", "time bipartite against self attention");
  add_common(bench, o);
  bench->add_option("--n", o.bench_n, "ascending feature counts")->expected(1, -1);
  bench->add_option("--m", o.bench_m, "latent count");
  bench->add_option("--d", o.bench_d, "model dimension");
  bench->add_option("--heads", o.bench_heads, "attention heads");
  bench->add_option("--repeats", o.bench_repeats, "timed repeats per size (median reported)");
  bench->add_option("--kind", o.bench_kind, "bipartite, self or both")
      ->check(CLI::IsMember({"bipartite", "self", "both"}));

  auto* ablate = app.add_subcommand("ablate", "sweep the attention level range");
  add_common(ablate, o);
  ablate->add_option("--steps", o.steps, "training steps per cell");
  ablate->add_option("--first", o.first_levels, "attn_first_level values")->expected(1, -1);
  ablate->add_option("--last", o.last_levels, "attn_last_level values")->expected(1, -1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    RunConfig cfg = resolve(o);
    if (*gen) {
      if (count_opt->count()) cfg.dataset_size = o.count;
      return cmd_gen_data(cfg);
    }
    if (*train) return cmd_train(cfg, o);
    if (*sample) return cmd_sample(cfg, o);
    if (*att) return cmd_attmaps(cfg, o);
    if (*eval) return cmd_eval(cfg, o);
    if (*bench) return cmd_bench(cfg, o);
    if (*ablate) return cmd_ablate(cfg, o);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
