#pragma once

// Run configuration: "key = value" lines with '#' comments. Every key has a
// setter with a range check and a formatter, so the resolved echo re-parses
// to the same configuration.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ganformer/attention.hpp"
#include "ganformer/errors.hpp"
#include "ganformer/network.hpp"
#include "ganformer/training.hpp"

namespace ganformer {

struct RunConfig {
  GeneratorConfig net;
  TrainConfig train;
  std::string dataset = "data";
  std::string out_dir = "out";
  std::size_t dataset_size = 2000;   // scenes written by gen-data
  std::size_t dataset_limit = 0;     // train on the first N scenes; 0 = all
  std::size_t eval_samples = 1000;
  std::uint64_t embedder_seed = 1234;
  std::size_t checkpoint_every = 1000;
  std::size_t log_every = 1;

  void validate() const {
    net.validate();
    train.validate();
  }
};

/// Desk defaults: k = 16, 32 dims per latent, r1_gamma = 40, 32 px, batch 16.
inline RunConfig default_run_config() {
  RunConfig c;
  c.net.resolution = 32;
  c.net.num_latents = 16;
  c.net.latent_dim = 32;
  c.train.r1_gamma = 40.0;
  c.train.batch_size = 16;
  return c;
}

namespace detail {

struct ConfigKey {
  std::string name;
  std::function<void(RunConfig&, std::string_view)> set;  // throws std::invalid_argument / std::out_of_range
  std::function<std::string(const RunConfig&)> get;
};

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::uint64_t parse_unsigned(std::string_view v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw std::invalid_argument("expected a non-negative integer, got '" + std::string(v) + "'");
  }
  return out;
}

inline long long parse_signed(std::string_view v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw std::invalid_argument("expected an integer, got '" + std::string(v) + "'");
  }
  return out;
}

inline double parse_real(std::string_view v) {
  const std::string s(v);
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty() || !std::isfinite(out)) {
    throw std::invalid_argument("expected a number, got '" + s + "'");
  }
  return out;
}

inline bool parse_bool(std::string_view v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw std::invalid_argument("expected true or false, got '" + std::string(v) + "'");
}

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::out_of_range(what);
}

template <typename F>
ConfigKey size_key(std::string name, F field, std::size_t min, std::size_t max = SIZE_MAX) {
  return {name,
          [=](RunConfig& c, std::string_view v) {
            const auto n = parse_unsigned(v);
            require(n >= min && n <= max, name + " must lie in [" + std::to_string(min) + ", " +
                                              (max == SIZE_MAX ? std::string("inf") : std::to_string(max)) + "]");
            field(c) = static_cast<std::size_t>(n);
          },
          [=](const RunConfig& c) { return std::to_string(field(c)); }};
}

template <typename F>
ConfigKey real_key(std::string name, F field, double lo, double hi, bool lo_open = false) {
  return {name,
          [=](RunConfig& c, std::string_view v) {
            const double x = parse_real(v);
            require((lo_open ? x > lo : x >= lo) && x <= hi,
                    name + " must lie in " + (lo_open ? "(" : "[") + format_real(lo) + ", " + format_real(hi) + "]");
            field(c) = x;
          },
          [=](const RunConfig& c) { return format_real(field(c)); }};
}

template <typename F>
ConfigKey bool_key(std::string name, F field) {
  return {name, [=](RunConfig& c, std::string_view v) { field(c) = parse_bool(v); },
          [=](const RunConfig& c) { return std::string(field(c) ? "true" : "false"); }};
}

template <typename F>
ConfigKey string_key(std::string name, F field) {
  return {name,
          [=](RunConfig& c, std::string_view v) {
            require(!v.empty(), name + " must not be empty");
            field(c) = std::string(v);
          },
          [=](const RunConfig& c) { return field(c); }};
}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    constexpr double inf = 1e300;
    // network
    k.push_back(size_key("output_resolution", [](auto& c) -> auto& { return c.net.resolution; }, 8, 1024));
    k.push_back(size_key("k", [](auto& c) -> auto& { return c.net.num_latents; }, 1, 256));
    k.push_back(size_key("latent_dim", [](auto& c) -> auto& { return c.net.latent_dim; }, 1, 4096));
    k.push_back(size_key("mapping_depth", [](auto& c) -> auto& { return c.net.mapping_depth; }, 1, 64));
    k.push_back({"attention_variant",
                 [](RunConfig& c, std::string_view v) {
                   const auto parsed = parse_variant(v);
                   require(parsed != AttentionVariant::kAdditive, "attention_variant must be simplex or duplex");
                   c.net.variant = parsed;
                 },
                 [](const RunConfig& c) { return std::string(to_string(c.net.variant)); }});
    k.push_back({"attn_first_level",
                 [](RunConfig& c, std::string_view v) {
                   const auto n = parse_signed(v);
                   require(n >= 0 && n < 64, "attn_first_level must lie in [0, 63]");
                   c.net.attn_first_level = static_cast<int>(n);
                 },
                 [](const RunConfig& c) { return std::to_string(c.net.attn_first_level); }});
    k.push_back({"attn_last_level",
                 [](RunConfig& c, std::string_view v) {
                   const auto n = parse_signed(v);
                   require(n >= -1 && n < 64, "attn_last_level must lie in [-1, 63]");
                   c.net.attn_last_level = static_cast<int>(n);
                 },
                 [](const RunConfig& c) { return std::to_string(c.net.attn_last_level); }});
    k.push_back(size_key("heads", [](auto& c) -> auto& { return c.net.heads; }, 1, 64));
    k.push_back(bool_key("use_resnet_skips", [](auto& c) -> auto& { return c.net.resnet; }));
    k.push_back(bool_key("noise_inputs", [](auto& c) -> auto& { return c.net.noise_inputs; }));
    k.push_back(bool_key("discriminator_attention", [](auto& c) -> auto& { return c.net.discriminator_attention; }));
    k.push_back(size_key("channel_base", [](auto& c) -> auto& { return c.net.channel_base; }, 1, 4096));
    k.push_back(size_key("channel_max", [](auto& c) -> auto& { return c.net.channel_max; }, 1, 4096));
    // training
    k.push_back(real_key("learning_rate", [](auto& c) -> auto& { return c.train.learning_rate; }, 0, 1, true));
    k.push_back(real_key("mapping_lr_mul", [](auto& c) -> auto& { return c.train.mapping_lr_mul; }, 0, 1, true));
    k.push_back(real_key("beta1", [](auto& c) -> auto& { return c.train.beta1; }, 0, 0.999999));
    k.push_back(real_key("beta2", [](auto& c) -> auto& { return c.train.beta2; }, 0, 0.999999));
    k.push_back(real_key("adam_eps", [](auto& c) -> auto& { return c.train.adam_eps; }, 0, 1, true));
    k.push_back(size_key("batch_size", [](auto& c) -> auto& { return c.train.batch_size; }, 2, 4096));
    k.push_back(real_key("r1_gamma", [](auto& c) -> auto& { return c.train.r1_gamma; }, 0, inf));
    k.push_back(size_key("r1_interval", [](auto& c) -> auto& { return c.train.r1_interval; }, 1));
    k.push_back(real_key("ema_decay", [](auto& c) -> auto& { return c.train.ema_decay; }, 0, 1));
    k.push_back(real_key("style_mix_prob", [](auto& c) -> auto& { return c.train.style_mix_prob; }, 0, 1));
    k.push_back(size_key("total_steps", [](auto& c) -> auto& { return c.train.total_steps; }, 0));
    k.push_back({"seed", [](RunConfig& c, std::string_view v) { c.train.seed = parse_unsigned(v); },
                 [](const RunConfig& c) { return std::to_string(c.train.seed); }});
    // run
    k.push_back(string_key("dataset", [](auto& c) -> auto& { return c.dataset; }));
    k.push_back(string_key("out_dir", [](auto& c) -> auto& { return c.out_dir; }));
    k.push_back(size_key("dataset_size", [](auto& c) -> auto& { return c.dataset_size; }, 0));
    k.push_back(size_key("dataset_limit", [](auto& c) -> auto& { return c.dataset_limit; }, 0));
    k.push_back(size_key("eval_samples", [](auto& c) -> auto& { return c.eval_samples; }, 2));
    k.push_back({"embedder_seed", [](RunConfig& c, std::string_view v) { c.embedder_seed = parse_unsigned(v); },
                 [](const RunConfig& c) { return std::to_string(c.embedder_seed); }});
    k.push_back(size_key("checkpoint_every", [](auto& c) -> auto& { return c.checkpoint_every; }, 0));
    k.push_back(size_key("log_every", [](auto& c) -> auto& { return c.log_every; }, 1));
    return k;
  }();
  return keys;
}

}  // namespace detail

/// Applies one "key = value" setting; `where` prefixes error messages.
inline void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value, const std::string& where) {
  for (const auto& k : detail::config_keys()) {
    if (k.name != key) continue;
    try {
      k.set(cfg, value);
    } catch (const std::out_of_range& e) {
      throw ConfigError(where + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + ": " + k.name + ": " + e.what());
    } catch (const Error& e) {
      throw ConfigError(where + ": " + k.name + ": " + e.what());
    }
    return;
  }
  throw ConfigError(where + ": unknown key '" + std::string(key) + "'");
}

/// Parses config text over `base`; absent keys keep their base values.
inline RunConfig parse_config(std::string_view text, RunConfig base = default_run_config()) {
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string where = "line " + std::to_string(line_no);
    std::string line = raw.substr(0, raw.find('#'));
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": missing key");
    apply_setting(base, key, value, where);
  }
  try {
    base.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return base;
}

/// Every effective value, one per line, in a form parse_config accepts.
inline std::string resolved_config(const RunConfig& cfg) {
  std::string out = "# resolved configuration\n";
  for (const auto& k : detail::config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

}  // namespace ganformer
