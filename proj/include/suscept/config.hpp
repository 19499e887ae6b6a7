#pragma once

// Experiment configuration: one TOML document per experiment.
//
// A user document is merged over default_config_toml(), so every key has a
// default and unknown keys or mistyped values are rejected. Relative paths
// resolve against the directory of the config file.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <toml.hpp>

#include "error.hpp"
#include "report.hpp"
#include "sampler.hpp"

namespace suscept {

/// Invalid or unreadable experiment configuration (exit status 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

inline std::string_view default_config_toml() {
  return R"(# Relative paths resolve against the directory of this file.
seed = 0
shuffle_seed = 0
delta_h = 0.1
output_dir = "out"
workers = 1
base_corpus = ""
vocab = ""
pattern_table = ""
# "all" for every attention head, or a list such as ["0:0", "0:1", "full"].
components = "all"
# Each entry is a path or { id = "...", path = "..." }.
checkpoints = []
probes = []

[sgld]
epsilon = 0.001
gamma = 300.0
n_beta = 30.0
chains = 4
draws = 200
batch_size = 64
burn_in = 0
batch_mode = "resample-each-step"
share_batch_indices = false
noise = true
divergence_factor = 10.0
divergence_floor = 1.0

[per_token]
epsilon = 0.001
gamma = 300.0
n_beta = 30.0
chains = 4
draws = 100
batch_size = 16
burn_in = 0
batch_mode = "resample-each-step"
share_batch_indices = false
noise = true
divergence_factor = 10.0
divergence_floor = 1.0
contexts = 160
context_seed = 0
# Checkpoint id; empty selects the last checkpoint.
checkpoint = ""
controlled = false

[pca]
# "per-token" or "grid"
source = "per-token"
# 0 selects the numerical rank, capped at 5.
k = 0
# Token rows sampled per dataset; 0 takes the smallest dataset's count.
samples_per_dataset = 0
sample_seed = 0
quantile = 0.01
min_tokens = 50

[trajectory]
k = 0

[report]
scheme = "quadratic"
window = 200
top_k = 10
contexts = 8
)";
}

struct NamedPath {
  std::string id;
  std::filesystem::path path;
  bool operator==(const NamedPath&) const = default;
};

struct ExperimentConfig {
  std::vector<NamedPath> checkpoints;
  std::filesystem::path base_corpus;
  std::vector<NamedPath> probes;
  std::optional<std::filesystem::path> vocab;
  std::optional<std::filesystem::path> pattern_table;
  std::vector<std::string> components;  // empty: every head
  double delta_h = 0.1;
  std::uint64_t seed = 0;
  std::uint64_t shuffle_seed = 0;
  std::filesystem::path output_dir = "out";
  std::size_t workers = 1;

  SGLDConfig sgld;
  SGLDConfig per_token_sgld = SGLDConfig::per_token_defaults();
  std::size_t contexts = 160;
  std::uint64_t context_seed = 0;
  std::string per_token_checkpoint;
  bool controlled = false;

  std::string pca_source = "per-token";
  std::size_t pca_k = 0;
  std::size_t pca_samples = 0;
  std::uint64_t pca_sample_seed = 0;
  double pca_quantile = 0.01;
  std::size_t pca_min_tokens = 50;

  std::size_t trajectory_k = 0;

  ColorScheme scheme = ColorScheme::quadratic;
  std::size_t window = 200;
  std::size_t top_k = 10;
  std::size_t report_contexts = 8;

  /// Merged document as JSON; hashed into the run manifest.
  std::string canonical;

  const NamedPath& per_token_source() const {
    if (per_token_checkpoint.empty()) return checkpoints.back();
    for (const auto& c : checkpoints)
      if (c.id == per_token_checkpoint) return c;
    throw ConfigError("per_token.checkpoint '" + per_token_checkpoint + "' is not a configured checkpoint");
  }
};

namespace detail {

inline bool same_kind(const toml::node& a, const toml::node& b) {
  if (a.type() == b.type()) return true;
  return a.is_floating_point() && b.is_integer();
}

/// Merges `src` into `dst`, rejecting keys absent from `dst` and values of a
/// different kind. `components` accepts a string or an array.
inline void merge_checked(toml::table& dst, const toml::table& src, const std::string& prefix) {
  for (auto&& [k, v] : src) {
    const std::string key = prefix.empty() ? std::string(k.str()) : prefix + "." + std::string(k.str());
    toml::node* cur = dst.get(k.str());
    if (!cur) throw ConfigError("unknown config key '" + key + "'");
    if (cur->is_table() && v.is_table()) {
      merge_checked(*cur->as_table(), *v.as_table(), key);
      continue;
    }
    const bool either = key == "components" && (v.is_string() || v.is_array());
    if (!either && !same_kind(*cur, v)) throw ConfigError("config key '" + key + "' has the wrong type");
    if (cur->is_floating_point() && v.is_integer())
      dst.insert_or_assign(k.str(), static_cast<double>(*v.value<std::int64_t>()));
    else
      dst.insert_or_assign(k.str(), v);
  }
}

inline const toml::node& at(const toml::table& t, std::string_view dotted) {
  const toml::node* n = nullptr;
  const toml::table* cur = &t;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const auto part = dotted.substr(start, dot == std::string_view::npos ? dotted.npos : dot - start);
    n = cur->get(part);
    if (!n) throw ConfigError("missing config key '" + std::string(dotted) + "'");
    if (dot == std::string_view::npos) return *n;
    cur = n->as_table();
    if (!cur) throw ConfigError("config key '" + std::string(dotted.substr(0, dot)) + "' is not a table");
    start = dot + 1;
  }
}

inline double get_real(const toml::table& t, std::string_view key) {
  auto v = at(t, key).value<double>();
  if (!v) throw ConfigError("config key '" + std::string(key) + "' must be a number");
  return *v;
}

inline std::uint64_t get_count(const toml::table& t, std::string_view key) {
  auto v = at(t, key).value<std::int64_t>();
  if (!v || *v < 0) throw ConfigError("config key '" + std::string(key) + "' must be a non-negative integer");
  return static_cast<std::uint64_t>(*v);
}

inline bool get_bool(const toml::table& t, std::string_view key) {
  auto v = at(t, key).value<bool>();
  if (!v) throw ConfigError("config key '" + std::string(key) + "' must be a boolean");
  return *v;
}

inline std::string get_string(const toml::table& t, std::string_view key) {
  auto v = at(t, key).value<std::string>();
  if (!v) throw ConfigError("config key '" + std::string(key) + "' must be a string");
  return *v;
}

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

inline std::vector<NamedPath> named_paths(const toml::table& t, std::string_view key,
                                          const std::filesystem::path& base) {
  std::vector<NamedPath> out;
  const auto* arr = at(t, key).as_array();
  if (!arr) throw ConfigError("config key '" + std::string(key) + "' must be an array");
  for (const auto& el : *arr) {
    NamedPath np;
    if (auto s = el.value<std::string>()) {
      np.path = resolve(base, *s);
      np.id = np.path.stem().string();
    } else if (const auto* tbl = el.as_table()) {
      auto id = (*tbl)["id"].value<std::string>();
      auto path = (*tbl)["path"].value<std::string>();
      if (!path || tbl->size() != (id ? 2u : 1u))
        throw ConfigError("entries of '" + std::string(key) + "' need a path and an optional id");
      np.path = resolve(base, *path);
      np.id = id ? *id : np.path.stem().string();
    } else {
      throw ConfigError("entries of '" + std::string(key) + "' must be strings or tables");
    }
    if (np.id.empty() || np.id.find_first_of("/\\") != std::string::npos || np.id == "." || np.id == "..")
      throw ConfigError("invalid id '" + np.id + "' in '" + std::string(key) + "'");
    for (const auto& o : out)
      if (o.id == np.id) throw ConfigError("duplicate id '" + np.id + "' in '" + std::string(key) + "'");
    out.push_back(std::move(np));
  }
  return out;
}

inline SGLDConfig sgld_block(const toml::table& t, const std::string& name) {
  SGLDConfig c;
  c.epsilon = get_real(t, name + ".epsilon");
  c.gamma = get_real(t, name + ".gamma");
  c.n_beta = get_real(t, name + ".n_beta");
  c.n_chains = get_count(t, name + ".chains");
  c.n_draws = get_count(t, name + ".draws");
  c.batch_size = get_count(t, name + ".batch_size");
  c.burn_in = get_count(t, name + ".burn_in");
  c.share_batch_indices = get_bool(t, name + ".share_batch_indices");
  c.noise_enabled = get_bool(t, name + ".noise");
  c.divergence_factor = get_real(t, name + ".divergence_factor");
  c.divergence_floor = get_real(t, name + ".divergence_floor");
  try {
    c.batch_mode = batch_mode_from_string(get_string(t, name + ".batch_mode"));
    c.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError("[" + name + "] " + e.what());
  }
  return c;
}

inline toml::table parse_toml(std::string_view text, const std::string& source) {
  try {
    return toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << source << ":" << e.source().begin.line << ": " << e.description();
    throw ConfigError(os.str());
  }
}

}  // namespace detail

/// Default document with `user` merged over it.
inline toml::table merged_config_table(const toml::table& user) {
  auto t = detail::parse_toml(default_config_toml(), "defaults");
  detail::merge_checked(t, user, "");
  return t;
}

/// Applies a "dotted.key=value" override. A value that does not parse as a
/// TOML value is taken as a bare string.
inline void apply_override(toml::table& user, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), value = assignment.substr(eq + 1);
  toml::table frag;
  try {
    frag = toml::parse(key + " = " + value);
  } catch (const toml::parse_error&) {
    std::string quoted = "\"";
    for (char c : value) {
      if (c == '"' || c == '\\') quoted += '\\';
      quoted += c;
    }
    frag = detail::parse_toml(key + " = " + quoted + "\"", "override");
  }
  auto check = detail::parse_toml(default_config_toml(), "defaults");
  detail::merge_checked(check, frag, "");
  // Deep merge of the fragment into the user table.
  std::function<void(toml::table&, const toml::table&)> merge = [&](toml::table& dst, const toml::table& src) {
    for (auto&& [k, v] : src) {
      auto* cur = dst.get(k.str());
      if (cur && cur->is_table() && v.is_table())
        merge(*cur->as_table(), *v.as_table());
      else
        dst.insert_or_assign(k.str(), v);
    }
  };
  merge(user, frag);
}

/// Builds the typed configuration from a user document.
inline ExperimentConfig config_from_table(const toml::table& user, const std::filesystem::path& base_dir = {}) {
  using namespace detail;
  const toml::table t = merged_config_table(user);
  ExperimentConfig c;
  c.seed = get_count(t, "seed");
  c.shuffle_seed = get_count(t, "shuffle_seed");
  c.delta_h = get_real(t, "delta_h");
  if (!(c.delta_h > 0.0 && c.delta_h <= 1.0)) throw ConfigError("delta_h must lie in (0, 1]");
  c.output_dir = resolve(base_dir, get_string(t, "output_dir"));
  c.workers = get_count(t, "workers");
  if (c.workers < 1) throw ConfigError("workers must be >= 1");
  if (auto s = get_string(t, "base_corpus"); !s.empty()) c.base_corpus = resolve(base_dir, s);
  if (auto s = get_string(t, "vocab"); !s.empty()) c.vocab = resolve(base_dir, s);
  if (auto s = get_string(t, "pattern_table"); !s.empty()) c.pattern_table = resolve(base_dir, s);
  const auto& comps = at(t, "components");
  if (auto s = comps.value<std::string>()) {
    if (*s != "all") throw ConfigError("components must be \"all\" or a list of component labels");
  } else {
    for (const auto& el : *comps.as_array()) {
      auto s2 = el.value<std::string>();
      if (!s2 || s2->empty()) throw ConfigError("components entries must be non-empty strings");
      if (std::find(c.components.begin(), c.components.end(), *s2) != c.components.end())
        throw ConfigError("duplicate component '" + *s2 + "'");
      c.components.push_back(*s2);
    }
    if (c.components.empty()) throw ConfigError("components list is empty");
  }
  c.checkpoints = named_paths(t, "checkpoints", base_dir);
  c.probes = named_paths(t, "probes", base_dir);

  c.sgld = sgld_block(t, "sgld");
  c.per_token_sgld = sgld_block(t, "per_token");
  c.contexts = get_count(t, "per_token.contexts");
  if (c.contexts < 1) throw ConfigError("per_token.contexts must be >= 1");
  c.context_seed = get_count(t, "per_token.context_seed");
  c.per_token_checkpoint = get_string(t, "per_token.checkpoint");
  c.controlled = get_bool(t, "per_token.controlled");

  c.pca_source = get_string(t, "pca.source");
  if (c.pca_source != "per-token" && c.pca_source != "grid")
    throw ConfigError("pca.source must be \"per-token\" or \"grid\"");
  c.pca_k = get_count(t, "pca.k");
  c.pca_samples = get_count(t, "pca.samples_per_dataset");
  c.pca_sample_seed = get_count(t, "pca.sample_seed");
  c.pca_quantile = get_real(t, "pca.quantile");
  if (!(c.pca_quantile > 0.0 && c.pca_quantile <= 1.0)) throw ConfigError("pca.quantile must lie in (0, 1]");
  c.pca_min_tokens = get_count(t, "pca.min_tokens");
  c.trajectory_k = get_count(t, "trajectory.k");

  try {
    c.scheme = color_scheme_from_string(get_string(t, "report.scheme"));
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("report.scheme: ") + e.what());
  }
  c.window = get_count(t, "report.window");
  c.top_k = get_count(t, "report.top_k");
  if (c.top_k < 1) throw ConfigError("report.top_k must be >= 1");
  c.report_contexts = get_count(t, "report.contexts");
  if (c.report_contexts < 1) throw ConfigError("report.contexts must be >= 1");

  std::ostringstream os;
  os << toml::json_formatter{t};
  c.canonical = os.str();
  c.sgld.seed = c.seed;
  c.per_token_sgld.seed = c.seed;
  return c;
}

inline toml::table read_config_table(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read config '" + path.string() + "'");
  std::string text{std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
  return detail::parse_toml(text, path.string());
}

/// Loads a config file with optional key=value overrides applied on top.
inline ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  auto user = read_config_table(path);
  for (const auto& o : overrides) apply_override(user, o);
  return config_from_table(user, path.parent_path());
}

}  // namespace suscept
