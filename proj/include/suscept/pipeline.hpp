#pragma once

// Grid orchestration behind the command-line tool: estimate, per-token, pca,
// trajectory, report, oracle-check and ingest, plus a synthetic experiment
// generator and the run manifest.
//
// Output layout under cfg.output_dir:
//   estimate/cells/<ckpt>/<probe>/<comp>.json   one susceptibility cell
//   estimate/<ckpt>.csv, estimate/estimates.json
//   per_token/<ckpt>/<probe>/<comp>.jsonl       per-token cell
//   pca/*.csv, trajectory/*.csv, report/*.html, report/per_token.csv
//   manifest.json
// Cells are written atomically and skipped when already present, so an
// interrupted run resumes where it stopped.

#include <atomic>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "analysis.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "estimators.hpp"
#include "io.hpp"
#include "model.hpp"
#include "oracle.hpp"
#include "patterns.hpp"
#include "report.hpp"
#include "sampler.hpp"

namespace suscept {

namespace fs = std::filesystem;

inline std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) throw Error("sha256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

/// Stable 64-bit FNV-1a, used to derive seeds from ids.
constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Outcome of one command. Failures name the cell or input that failed.
struct CommandResult {
  std::size_t cells = 0;
  std::size_t skipped = 0;
  std::vector<std::string> failures;

  int exit_code() const { return failures.empty() ? 0 : 1; }
};

/// Runs fn(0..n-1) on `workers` threads; returns one message per failed job
/// (empty for success), indexed by job.
inline std::vector<std::string> run_jobs(std::size_t n, std::size_t workers,
                                         const std::function<void(std::size_t)>& fn) {
  std::vector<std::string> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (const std::exception& e) {
        errors[i] = e.what();
        if (errors[i].empty()) errors[i] = "unknown error";
      }
    }
  };
  const std::size_t t = std::max<std::size_t>(1, std::min(workers, n));
  if (t == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < t; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  return errors;
}

// ---------------------------------------------------------------------------
// Inputs

struct ComponentSpec {
  std::string label;
  std::optional<ComponentMask> mask;  // none: unrestricted ("full")
};

/// File-name form of a component label.
inline std::string component_stem(const std::string& label) {
  std::string s = label;
  for (auto& c : s)
    if (c == ':' || c == '/' || c == '\\') c = '-';
  return s;
}

inline std::vector<ComponentSpec> resolve_components(const ExperimentConfig& cfg, const Transformer& model) {
  std::vector<ComponentSpec> out;
  const auto& mc = model.config();
  if (cfg.components.empty()) {
    for (std::size_t l = 0; l < mc.n_layers; ++l)
      for (std::size_t h = 0; h < mc.n_heads; ++h) out.push_back({Transformer::head_label(l, h), model.head_mask(l, h)});
    return out;
  }
  for (const auto& label : cfg.components) {
    if (label == "full") {
      out.push_back({label, std::nullopt});
      continue;
    }
    const auto colon = label.find(':');
    std::size_t l = 0, h = 0;
    const char* b = label.data();
    const char* e = b + label.size();
    const bool ok = colon != std::string::npos && std::from_chars(b, b + colon, l).ptr == b + colon &&
                    std::from_chars(b + colon + 1, e, h).ptr == e && colon > 0 && colon + 1 < label.size();
    if (!ok) throw ConfigError("component '" + label + "' is not \"full\" or \"layer:head\"");
    if (l >= mc.n_layers || h >= mc.n_heads)
      throw ConfigError("component '" + label + "' is outside the " + std::to_string(mc.n_layers) + "x" +
                        std::to_string(mc.n_heads) + " head grid");
    out.push_back({label, model.head_mask(l, h)});
  }
  return out;
}

/// Everything a grid command reads, loaded once.
struct Inputs {
  std::vector<Checkpoint> checkpoints;
  std::vector<std::unique_ptr<Transformer>> models;
  Corpus base;
  std::vector<Corpus> probes;
  std::vector<ComponentSpec> components;  // resolved against the first checkpoint

  std::size_t checkpoint_index(const std::string& id, const ExperimentConfig& cfg) const {
    for (std::size_t i = 0; i < cfg.checkpoints.size(); ++i)
      if (cfg.checkpoints[i].id == id) return i;
    throw ConfigError("unknown checkpoint '" + id + "'");
  }
};

namespace detail {

inline void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw ConfigError(what + " '" + p.string() + "' does not exist");
}

}  // namespace detail

inline Inputs load_inputs(const ExperimentConfig& cfg, bool need_probes = true) {
  if (cfg.checkpoints.empty()) throw ConfigError("no checkpoints configured");
  if (cfg.base_corpus.empty()) throw ConfigError("base_corpus is not configured");
  if (need_probes && cfg.probes.empty()) throw ConfigError("no probes configured");
  Inputs in;
  for (const auto& c : cfg.checkpoints) {
    detail::require_file(c.path, "checkpoint");
    try {
      in.checkpoints.push_back(load_checkpoint(c.path.string()));
    } catch (const ParseError& e) {
      throw ConfigError("checkpoint '" + c.id + "': " + e.what());
    }
    const auto& mc = in.checkpoints.back().config;
    const auto& first = in.checkpoints.front().config;
    if (mc.vocab_size != first.vocab_size || mc.bos() != first.bos())
      throw ConfigError("checkpoint '" + c.id + "' uses a different vocabulary from '" + cfg.checkpoints[0].id + "'");
    in.models.push_back(std::make_unique<Transformer>(mc));
  }
  const auto& mc = in.checkpoints.front().config;
  auto load = [&](const fs::path& p, const std::string& id, const std::string& what) {
    detail::require_file(p, what);
    try {
      return load_corpus(p.string(), mc.vocab_size, mc.bos(), id);
    } catch (const ParseError& e) {
      throw ConfigError(e.what());
    }
  };
  in.base = load(cfg.base_corpus, "base", "base corpus");
  for (const auto& p : cfg.probes) in.probes.push_back(load(p.path, p.id, "probe corpus"));
  in.components = resolve_components(cfg, *in.models.front());
  return in;
}

inline TokenDecoder load_configured_decoder(const ExperimentConfig& cfg, std::size_t vocab_size) {
  if (!cfg.vocab) throw ConfigError("vocab is not configured");
  detail::require_file(*cfg.vocab, "vocab");
  try {
    auto dec = load_decoder(cfg.vocab->string());
    dec.check_covers(vocab_size);
    return dec;
  } catch (const Error& e) {
    throw ConfigError(std::string("vocab: ") + e.what());
  }
}

inline PatternTable load_configured_table(const ExperimentConfig& cfg) {
  if (!cfg.pattern_table) return default_pattern_table();
  detail::require_file(*cfg.pattern_table, "pattern table");
  try {
    return load_pattern_table(cfg.pattern_table->string());
  } catch (const Error& e) {
    throw ConfigError(std::string("pattern table: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Cell paths

inline fs::path estimate_cell_path(const ExperimentConfig& cfg, const std::string& ckpt, const std::string& probe,
                                   const std::string& comp) {
  return cfg.output_dir / "estimate" / "cells" / ckpt / probe / (component_stem(comp) + ".json");
}

inline fs::path per_token_cell_path(const ExperimentConfig& cfg, const std::string& ckpt, const std::string& probe,
                                    const std::string& comp) {
  return cfg.output_dir / "per_token" / ckpt / probe / (component_stem(comp) + ".jsonl");
}

namespace detail {

inline std::optional<SusceptibilityEstimate> read_estimate_cell(const fs::path& p) {
  if (!fs::is_regular_file(p)) return std::nullopt;
  try {
    return susceptibility_from_json(nlohmann::json::parse(read_file(p)));
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

inline PerTokenEstimate per_token_from_records(const std::vector<PerTokenRecord>& recs, const std::string& dataset,
                                               const std::string& component) {
  PerTokenEstimate e;
  e.dataset = dataset;
  e.component = component;
  for (const auto& r : recs) {
    if (r.dataset != dataset || r.component != component)
      throw ParseError("per-token file holds records for (" + r.dataset + ", " + r.component + ")");
    e.keys.push_back(r.key);
    e.values.push_back(r.value);
  }
  if (e.values.empty()) throw ParseError("per-token file is empty");
  return e;
}

inline std::optional<PerTokenEstimate> read_per_token_cell(const fs::path& p, const std::string& dataset,
                                                           const std::string& component) {
  if (!fs::is_regular_file(p)) return std::nullopt;
  try {
    std::istringstream is(read_file(p));
    return per_token_from_records(read_per_token_jsonl(is), dataset, component);
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

inline std::string dump_line(const nlohmann::json& j) { return j.dump(2) + "\n"; }

}  // namespace detail

/// Per-token estimate stored by cmd_per_token; throws naming the file if absent.
inline PerTokenEstimate load_per_token_cell(const ExperimentConfig& cfg, const std::string& ckpt,
                                            const std::string& probe, const std::string& comp) {
  const auto p = per_token_cell_path(cfg, ckpt, probe, comp);
  if (!fs::is_regular_file(p)) throw Error("missing per-token output '" + p.string() + "' (run per-token first)");
  std::istringstream is(read_file(p));
  return detail::per_token_from_records(read_per_token_jsonl(is), probe, comp);
}

inline SusceptibilityEstimate load_estimate_cell(const ExperimentConfig& cfg, const std::string& ckpt,
                                                 const std::string& probe, const std::string& comp) {
  const auto p = estimate_cell_path(cfg, ckpt, probe, comp);
  auto e = detail::read_estimate_cell(p);
  if (!e) throw Error("missing estimate cell '" + p.string() + "' (run estimate first)");
  return *e;
}

// ---------------------------------------------------------------------------
// estimate

inline CommandResult cmd_estimate(const ExperimentConfig& cfg, std::ostream& log) {
  Inputs in = load_inputs(cfg);
  CommandResult res;
  const std::size_t C = cfg.checkpoints.size(), P = cfg.probes.size(), K = in.components.size();

  struct Group {
    std::unique_ptr<Corpus> d0, dh;
    std::unique_ptr<TransformerProblem> problem;
    std::vector<ChainTrace> full;
    std::vector<std::size_t> pending;  // component indices
    std::string error;
  };
  std::vector<Group> groups(C * P);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t k = 0; k < K; ++k) {
        ++res.cells;
        const auto path = estimate_cell_path(cfg, cfg.checkpoints[c].id, cfg.probes[p].id, in.components[k].label);
        if (detail::read_estimate_cell(path))
          ++res.skipped;
        else
          groups[c * P + p].pending.push_back(k);
      }

  auto base_seed = [&](std::size_t c, std::size_t p) {
    return derive_seed(cfg.seed, {fnv1a("estimate"), fnv1a(cfg.checkpoints[c].id), fnv1a(cfg.probes[p].id)});
  };
  std::vector<std::size_t> active;
  for (std::size_t g = 0; g < groups.size(); ++g)
    if (!groups[g].pending.empty()) active.push_back(g);

  // Full chains per (checkpoint, probe).
  auto full_errors = run_jobs(active.size(), cfg.workers, [&](std::size_t j) {
    const std::size_t g = active[j], c = g / P, p = g % P;
    auto& gr = groups[g];
    gr.d0 = std::make_unique<Corpus>(mix_datasets(in.base, in.probes[p], 0.0, cfg.shuffle_seed));
    gr.dh = std::make_unique<Corpus>(mix_datasets(in.base, in.probes[p], cfg.delta_h, cfg.shuffle_seed));
    gr.problem = std::make_unique<TransformerProblem>(*in.models[c], *gr.d0, gr.dh.get());
    SGLDConfig s = cfg.sgld;
    s.workers = 1;
    s.seed = base_seed(c, p);
    gr.full = run_chains(*gr.problem, in.checkpoints[c].params.values, s);
  });
  for (std::size_t j = 0; j < active.size(); ++j) groups[active[j]].error = full_errors[j];

  struct Job {
    std::size_t g, k;
  };
  std::vector<Job> jobs;
  for (auto g : active)
    for (auto k : groups[g].pending) {
      if (!groups[g].error.empty()) {
        const std::size_t c = g / P, p = g % P;
        res.failures.push_back("estimate " + cfg.checkpoints[c].id + "/" + cfg.probes[p].id + "/" +
                               in.components[k].label + ": full chains failed: " + groups[g].error);
        continue;
      }
      jobs.push_back({g, k});
    }
  auto cell_errors = run_jobs(jobs.size(), cfg.workers, [&](std::size_t j) {
    const auto [g, k] = jobs[j];
    const std::size_t c = g / P, p = g % P;
    const auto& comp = in.components[k];
    const auto& gr = groups[g];
    SusceptibilityEstimate est;
    if (comp.mask) {
      SGLDConfig s = cfg.sgld;
      s.workers = 1;
      s.seed = derive_seed(base_seed(c, p), {fnv1a(comp.label)});
      auto restricted = run_chains(*gr.problem, in.checkpoints[c].params.values, s, &*comp.mask);
      est = estimate_susceptibility(restricted, gr.full, comp.label, cfg.probes[p].id, cfg.delta_h);
    } else {
      est = estimate_susceptibility(gr.full, gr.full, comp.label, cfg.probes[p].id, cfg.delta_h);
    }
    auto j2 = to_json(est);
    j2["checkpoint"] = cfg.checkpoints[c].id;
    write_file_atomic(estimate_cell_path(cfg, cfg.checkpoints[c].id, cfg.probes[p].id, comp.label),
                      detail::dump_line(j2));
  });
  for (std::size_t j = 0; j < jobs.size(); ++j)
    if (!cell_errors[j].empty()) {
      const std::size_t c = jobs[j].g / P, p = jobs[j].g % P;
      res.failures.push_back("estimate " + cfg.checkpoints[c].id + "/" + cfg.probes[p].id + "/" +
                             in.components[jobs[j].k].label + ": " + cell_errors[j]);
    }

  // Summaries over every completed cell, in grid order.
  auto all = nlohmann::json::array();
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<SusceptibilityEstimate> ests;
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t k = 0; k < K; ++k) {
        auto e = detail::read_estimate_cell(
            estimate_cell_path(cfg, cfg.checkpoints[c].id, cfg.probes[p].id, in.components[k].label));
        if (!e) continue;
        auto j = to_json(*e);
        j["checkpoint"] = cfg.checkpoints[c].id;
        all.push_back(j);
        ests.push_back(std::move(*e));
      }
    std::ostringstream os;
    write_estimates_csv(os, ests);
    write_file_atomic(cfg.output_dir / "estimate" / (cfg.checkpoints[c].id + ".csv"), os.str());
  }
  write_file_atomic(cfg.output_dir / "estimate" / "estimates.json", detail::dump_line(all));
  log << "estimate: " << res.cells << " cells, " << res.skipped << " reused, " << res.failures.size()
      << " failed\n";
  return res;
}

// ---------------------------------------------------------------------------
// per-token

inline CommandResult cmd_per_token(const ExperimentConfig& cfg, std::ostream& log) {
  Inputs in = load_inputs(cfg);
  CommandResult res;
  const auto& src = cfg.per_token_source();
  const std::size_t c = in.checkpoint_index(src.id, cfg);
  const auto components = resolve_components(cfg, *in.models[c]);
  const std::size_t P = cfg.probes.size(), K = components.size();

  struct Group {
    std::vector<Sequence> contexts;
    std::unique_ptr<TransformerProblem> problem;
    std::vector<ChainTrace> full;
    std::vector<std::size_t> pending;
    std::string error;
  };
  std::vector<Group> groups(P);
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t k = 0; k < K; ++k) {
      ++res.cells;
      if (detail::read_per_token_cell(per_token_cell_path(cfg, src.id, cfg.probes[p].id, components[k].label),
                                      cfg.probes[p].id, components[k].label))
        ++res.skipped;
      else
        groups[p].pending.push_back(k);
    }
  SGLDConfig base_cfg = cfg.per_token_sgld;
  base_cfg.workers = 1;
  if (cfg.controlled) base_cfg.controlled_delta_h = cfg.delta_h;
  auto base_seed = [&](std::size_t p) {
    return derive_seed(cfg.seed, {fnv1a("per-token"), fnv1a(src.id), fnv1a(cfg.probes[p].id)});
  };

  std::vector<std::size_t> active;
  for (std::size_t p = 0; p < P; ++p)
    if (!groups[p].pending.empty()) active.push_back(p);
  auto full_errors = run_jobs(active.size(), cfg.workers, [&](std::size_t j) {
    const std::size_t p = active[j];
    auto& gr = groups[p];
    gr.contexts = sample_probe_contexts(in.probes[p], cfg.contexts, cfg.context_seed);
    gr.problem = std::make_unique<TransformerProblem>(*in.models[c], in.base, nullptr, gr.contexts);
    SGLDConfig s = base_cfg;
    s.seed = base_seed(p);
    gr.full = run_chains(*gr.problem, in.checkpoints[c].params.values, s);
  });
  for (std::size_t j = 0; j < active.size(); ++j) groups[active[j]].error = full_errors[j];

  std::vector<std::pair<std::size_t, std::size_t>> jobs;
  for (auto p : active)
    for (auto k : groups[p].pending) {
      if (!groups[p].error.empty())
        res.failures.push_back("per-token " + src.id + "/" + cfg.probes[p].id + "/" + components[k].label +
                               ": full chains failed: " + groups[p].error);
      else
        jobs.emplace_back(p, k);
    }
  auto errors = run_jobs(jobs.size(), cfg.workers, [&](std::size_t j) {
    const auto [p, k] = jobs[j];
    const auto& comp = components[k];
    const auto& gr = groups[p];
    std::vector<ChainTrace> restricted;
    if (comp.mask) {
      SGLDConfig s = base_cfg;
      s.seed = derive_seed(base_seed(p), {fnv1a(comp.label)});
      restricted = run_chains(*gr.problem, in.checkpoints[c].params.values, s, &*comp.mask);
    }
    const auto& r = comp.mask ? restricted : gr.full;
    auto est = estimate_per_token(r, gr.full, gr.contexts, comp.label, cfg.probes[p].id);
    const auto path = per_token_cell_path(cfg, src.id, cfg.probes[p].id, comp.label);
    if (cfg.controlled) {
      auto sus = estimate_susceptibility(r, gr.full, comp.label, cfg.probes[p].id, cfg.delta_h);
      auto j2 = to_json(sus);
      j2["checkpoint"] = src.id;
      j2["controlled_delta_h"] = cfg.delta_h;
      j2["identity_residual"] = aggregate_identity_check(sus, est, cfg.delta_h);
      auto agg = path;
      agg.replace_extension(".aggregate.json");
      write_file_atomic(agg, detail::dump_line(j2));
    }
    std::ostringstream os;
    write_per_token_jsonl(os, est);
    write_file_atomic(path, os.str());
  });
  for (std::size_t j = 0; j < jobs.size(); ++j)
    if (!errors[j].empty())
      res.failures.push_back("per-token " + src.id + "/" + cfg.probes[jobs[j].first].id + "/" +
                             components[jobs[j].second].label + ": " + errors[j]);
  log << "per-token: " << res.cells << " cells, " << res.skipped << " reused, " << res.failures.size()
      << " failed\n";
  return res;
}

// ---------------------------------------------------------------------------
// pca

namespace detail {

inline std::size_t choose_k(std::size_t requested, const Eigen::MatrixXd& standardized, const char* what) {
  const std::size_t rank = numerical_rank(standardized);
  if (rank == 0) throw Error(std::string(what) + ": standardized matrix has rank 0");
  if (requested == 0) return std::min<std::size_t>(rank, 5);
  if (requested > rank)
    throw Error(std::string(what) + ": k = " + std::to_string(requested) + " exceeds the numerical rank " +
                std::to_string(rank));
  return requested;
}

inline void write_csv_file(const fs::path& p, const std::function<void(std::ostream&)>& fn) {
  std::ostringstream os;
  fn(os);
  write_file_atomic(p, os.str());
}

}  // namespace detail

inline CommandResult cmd_pca(const ExperimentConfig& cfg, std::ostream& log) {
  CommandResult res;
  res.cells = 1;
  const fs::path dir = cfg.output_dir / "pca";
  Inputs in = load_inputs(cfg);
  const auto& src = cfg.per_token_source();
  const std::size_t c = in.checkpoint_index(src.id, cfg);
  const auto components = resolve_components(cfg, *in.models[c]);
  try {
    if (cfg.pca_source == "grid") {
      std::vector<SusceptibilityEstimate> ests;
      for (const auto& p : cfg.probes)
        for (const auto& comp : components) ests.push_back(load_estimate_cell(cfg, src.id, p.id, comp.label));
      auto m = build_response_matrix(ests);
      auto x = standardize_columns(m);
      auto result = pca(x, detail::choose_k(cfg.pca_k, x.values, "pca"));
      detail::write_csv_file(dir / "matrix.csv", [&](std::ostream& os) { write_matrix_csv(os, m); });
      detail::write_csv_file(dir / "loadings.csv", [&](std::ostream& os) { write_loadings_csv(os, result); });
      detail::write_csv_file(dir / "scores.csv", [&](std::ostream& os) { write_scores_csv(os, result, m.rows); });
      detail::write_csv_file(dir / "variance.csv", [&](std::ostream& os) { write_variance_csv(os, result); });
      log << "pca: grid matrix " << m.rows.size() << "x" << m.cols.size() << ", k = " << result.k() << "\n";
      return res;
    }

    std::vector<PerTokenEstimate> ests;
    for (const auto& p : cfg.probes)
      for (const auto& comp : components) ests.push_back(load_per_token_cell(cfg, src.id, p.id, comp.label));
    std::size_t samples = cfg.pca_samples;
    if (samples == 0) {
      samples = ests.front().size();
      for (const auto& e : ests) samples = std::min(samples, e.size());
    }
    auto m = build_pertoken_matrix(ests, samples, cfg.pca_sample_seed);
    auto x = standardize_columns(m);
    auto result = pca(x, detail::choose_k(cfg.pca_k, x.values, "pca"));
    detail::write_csv_file(dir / "matrix.csv", [&](std::ostream& os) { write_matrix_csv(os, m); });
    detail::write_csv_file(dir / "loadings.csv", [&](std::ostream& os) { write_loadings_csv(os, result); });
    detail::write_csv_file(dir / "scores.csv", [&](std::ostream& os) { write_scores_csv(os, result, m.rows); });
    detail::write_csv_file(dir / "variance.csv", [&](std::ostream& os) { write_variance_csv(os, result); });

    detail::write_csv_file(dir / "contributions.csv", [&](std::ostream& os) {
      os << "pc,dataset,mean,std_error,count\n";
      for (std::size_t i = 0; i < result.k(); ++i)
        for (const auto& d : dataset_pc_contributions(i, m, result))
          os << "PC" << i + 1 << ',' << csv_field(d.dataset) << ',' << format_double(d.mean) << ','
             << format_double(d.std_error) << ',' << d.count << '\n';
    });

    if (cfg.vocab) {
      const auto decoder = load_configured_decoder(cfg, in.checkpoints[c].config.vocab_size);
      const auto table = load_configured_table(cfg);
      const auto stats = bigram_stats(in.base);
      ContextClassifier classify(stats, decoder, table);
      for (std::size_t p = 0; p < cfg.probes.size(); ++p)
        classify.add_dataset(cfg.probes[p].id, sample_probe_contexts(in.probes[p], cfg.contexts, cfg.context_seed));
      detail::write_csv_file(dir / "profiles.csv", [&](std::ostream& os) {
        os << "pc,bucket,bucket_size";
        for (auto l : kAllPatterns) os << ',' << to_string(l);
        os << '\n';
        for (std::size_t i = 0; i < result.k(); ++i) {
          auto prof = top_token_pattern_profile(i, m, result, std::cref(classify), cfg.pca_quantile,
                                                cfg.pca_min_tokens);
          for (int side = 0; side < 2; ++side) {
            os << "PC" << i + 1 << ',' << (side == 0 ? "positive" : "negative") << ',' << prof.bucket_size;
            for (double f : side == 0 ? prof.top_positive : prof.top_negative) os << ',' << format_double(f);
            os << '\n';
          }
        }
      });
    } else {
      log << "pca: vocab not configured, pattern profiles skipped\n";
    }
    log << "pca: " << m.rows.size() << " token rows x " << m.cols.size() << " components, k = " << result.k()
        << "\n";
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    res.failures.push_back(std::string("pca: ") + e.what());
  }
  return res;
}

// ---------------------------------------------------------------------------
// trajectory

inline CommandResult cmd_trajectory(const ExperimentConfig& cfg, std::ostream& log) {
  CommandResult res;
  res.cells = 1;
  if (cfg.checkpoints.size() < 2) throw ConfigError("trajectory needs at least 2 checkpoints");
  Inputs in = load_inputs(cfg);
  const fs::path dir = cfg.output_dir / "trajectory";
  try {
    std::vector<std::pair<std::string, ResponseMatrix>> per;
    for (std::size_t c = 0; c < cfg.checkpoints.size(); ++c) {
      std::vector<SusceptibilityEstimate> ests;
      for (const auto& p : cfg.probes)
        for (const auto& comp : in.components) ests.push_back(load_estimate_cell(cfg, cfg.checkpoints[c].id, p.id, comp.label));
      per.emplace_back(cfg.checkpoints[c].id, build_response_matrix(ests));
    }
    // Rank check on the stacked, standardized matrix before choosing k.
    auto probe = trajectory_pca(per, 1);
    const std::size_t k = detail::choose_k(cfg.trajectory_k, probe.stacked.values, "trajectory");
    auto r = trajectory_pca(per, k);
    detail::write_csv_file(dir / "stacked.csv", [&](std::ostream& os) { write_matrix_csv(os, r.stacked); });
    detail::write_csv_file(dir / "loadings.csv", [&](std::ostream& os) { write_loadings_csv(os, r.pca); });
    detail::write_csv_file(dir / "variance.csv", [&](std::ostream& os) { write_variance_csv(os, r.pca); });
    detail::write_csv_file(dir / "projections.csv", [&](std::ostream& os) {
      os << "dataset,checkpoint";
      for (std::size_t i = 0; i < k; ++i) os << ",PC" << i + 1;
      os << '\n';
      for (std::size_t d = 0; d < r.datasets.size(); ++d)
        for (std::size_t t = 0; t < r.checkpoints.size(); ++t) {
          os << csv_field(r.datasets[d]) << ',' << csv_field(r.checkpoints[t]);
          for (std::size_t i = 0; i < k; ++i)
            os << ',' << format_double(r.projections[d](static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(i)));
          os << '\n';
        }
    });
    log << "trajectory: " << r.stacked.rows.size() << " stacked rows, k = " << k << "\n";
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    res.failures.push_back(std::string("trajectory: ") + e.what());
  }
  return res;
}

// ---------------------------------------------------------------------------
// report

inline CommandResult cmd_report(const ExperimentConfig& cfg, std::ostream& log) {
  CommandResult res;
  Inputs in = load_inputs(cfg);
  const auto& src = cfg.per_token_source();
  const std::size_t c = in.checkpoint_index(src.id, cfg);
  const auto components = resolve_components(cfg, *in.models[c]);
  const auto decoder = load_configured_decoder(cfg, in.checkpoints[c].config.vocab_size);
  const fs::path dir = cfg.output_dir / "report";
  std::vector<PerTokenEstimate> all;
  for (std::size_t p = 0; p < cfg.probes.size(); ++p) {
    const auto& id = cfg.probes[p].id;
    ++res.cells;
    try {
      const auto contexts = sample_probe_contexts(in.probes[p], cfg.contexts, cfg.context_seed);
      std::vector<PerTokenEstimate> ests;
      for (const auto& comp : components) ests.push_back(load_per_token_cell(cfg, src.id, id, comp.label));
      const std::size_t shown = std::min(cfg.report_contexts, contexts.size());
      std::vector<PerTokenEstimate> head;
      for (const auto& e : ests) {
        PerTokenEstimate h;
        h.component = e.component;
        h.dataset = e.dataset;
        for (std::size_t i = 0; i < e.size(); ++i)
          if (e.keys[i].context < shown) {
            h.keys.push_back(e.keys[i]);
            h.values.push_back(e.values[i]);
          }
        head.push_back(std::move(h));
      }
      const std::vector<Sequence> shown_ctx(contexts.begin(), contexts.begin() + static_cast<std::ptrdiff_t>(shown));
      write_file_atomic(dir / (id + ".html"),
                        render_context_html(shown_ctx, head, cfg.scheme, decoder, id + " @ " + src.id));
      for (const auto& e : ests)
        write_file_atomic(dir / "top" / id / (component_stem(e.component) + ".html"),
                          render_top_contexts(contexts, e, decoder, cfg.window, std::min(cfg.top_k, e.size()),
                                              cfg.scheme));
      for (auto& e : ests) all.push_back(std::move(e));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      res.failures.push_back("report " + id + ": " + e.what());
    }
  }
  detail::write_csv_file(dir / "per_token.csv", [&](std::ostream& os) { write_per_token_csv(os, all); });
  log << "report: " << res.cells - res.failures.size() << " of " << res.cells << " probes rendered\n";
  return res;
}

// ---------------------------------------------------------------------------
// manifest

/// Lists every file under the output directory with its SHA-256, plus input
/// hashes and the config hash. Commands accumulate in first-run order.
inline void write_manifest(const ExperimentConfig& cfg, const std::string& command) {
  const fs::path path = cfg.output_dir / "manifest.json";
  std::vector<std::string> commands;
  if (fs::is_regular_file(path)) {
    try {
      auto old = nlohmann::json::parse(read_file(path));
      commands = old.at("commands").get<std::vector<std::string>>();
    } catch (const std::exception&) {
      commands.clear();
    }
  }
  if (std::find(commands.begin(), commands.end(), command) == commands.end()) commands.push_back(command);

  auto file_entry = [](const fs::path& p) {
    const auto data = read_file(p);
    return nlohmann::json{{"sha256", sha256_hex(data)}, {"bytes", data.size()}};
  };
  nlohmann::json m;
  m["config_sha256"] = sha256_hex(cfg.canonical);
  m["config"] = nlohmann::json::parse(cfg.canonical);
  m["seed"] = cfg.seed;
  m["shuffle_seed"] = cfg.shuffle_seed;
  m["commands"] = commands;
  auto inputs = nlohmann::json::array();
  auto add_input = [&](const std::string& role, const std::string& id, const fs::path& p) {
    if (!fs::is_regular_file(p)) return;
    auto e = file_entry(p);
    e["role"] = role;
    e["id"] = id;
    inputs.push_back(e);
  };
  for (const auto& c : cfg.checkpoints) add_input("checkpoint", c.id, c.path);
  add_input("base_corpus", "base", cfg.base_corpus);
  for (const auto& p : cfg.probes) add_input("probe", p.id, p.path);
  if (cfg.vocab) add_input("vocab", "vocab", *cfg.vocab);
  if (cfg.pattern_table) add_input("pattern_table", "patterns", *cfg.pattern_table);
  m["inputs"] = inputs;

  std::vector<fs::path> files;
  if (fs::is_directory(cfg.output_dir))
    for (const auto& e : fs::recursive_directory_iterator(cfg.output_dir))
      if (e.is_regular_file() && e.path() != path && e.path().extension() != ".tmp") files.push_back(e.path());
  std::vector<std::pair<std::string, fs::path>> rel;
  for (const auto& f : files) rel.emplace_back(fs::relative(f, cfg.output_dir).generic_string(), f);
  std::sort(rel.begin(), rel.end());
  auto outputs = nlohmann::json::array();
  for (const auto& [name, f] : rel) {
    auto e = file_entry(f);
    e["path"] = name;
    outputs.push_back(e);
  }
  m["outputs"] = outputs;
  write_file_atomic(path, detail::dump_line(m));
}

// ---------------------------------------------------------------------------
// oracle-check

struct OracleScenario {
  std::string name;
  QuadraticPotential potential;
  std::string quantity = "susceptibility";  // or "llc"
  std::string sampler = "exact";            // or "sgld"
  std::size_t chains = 8;
  std::size_t draws = 10000;
  std::uint64_t seed = 0;
  double epsilon = 1e-3;
  std::size_t burn_in = 0;
  std::optional<double> tol_standard_errors;
  std::optional<double> tol_relative;
  std::optional<double> expected;  // fixture value of the closed form
  double expected_tolerance = 1e-12;
};

struct OracleResult {
  std::string name;
  double analytic = 0.0;
  double measured = 0.0;
  double std_error = 0.0;
  double error = 0.0;
  double bound = 0.0;
  bool closed_form_ok = true;
  bool pass = false;
};

struct OracleOptions {
  /// Mutation hook: negates every measured estimate.
  bool flip_sign = false;
};

namespace detail {

inline Eigen::MatrixXd json_matrix(const nlohmann::json& j, std::size_t d, const std::string& what) {
  if (!j.is_array() || j.size() != d) throw ParseError(what + " must be a " + std::to_string(d) + "x" + std::to_string(d) + " array");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (std::size_t r = 0; r < d; ++r) {
    if (!j[r].is_array() || j[r].size() != d) throw ParseError(what + " row " + std::to_string(r) + " has the wrong length");
    for (std::size_t c = 0; c < d; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = j[r][c].get<double>();
  }
  return m;
}

inline QuadraticPotential potential_from_json(const nlohmann::json& j) {
  if (j.contains("random")) {
    const auto& r = j["random"];
    RandomPotentialOptions o;
    const auto pert = r.value("perturbation", std::string("random"));
    if (pert == "random") o.perturbation = RandomPotentialOptions::Perturbation::random;
    else if (pert == "zero") o.perturbation = RandomPotentialOptions::Perturbation::zero;
    else if (pert == "negative_a") o.perturbation = RandomPotentialOptions::Perturbation::negative_a;
    else if (pert == "identity") o.perturbation = RandomPotentialOptions::Perturbation::identity;
    else throw ParseError("unknown perturbation '" + pert + "'");
    o.linear_term = r.value("linear_term", false);
    o.a_scale = r.value("a_scale", o.a_scale);
    o.b_scale = r.value("b_scale", o.b_scale);
    o.gamma = r.value("gamma", o.gamma);
    o.n_beta = r.value("n_beta", o.n_beta);
    return random_potential(r.at("dim").get<std::size_t>(), r.at("seed").get<std::uint64_t>(), o);
  }
  QuadraticPotential p;
  const auto& A = j.at("A");
  const std::size_t d = A.size();
  p.A = json_matrix(A, d, "A");
  p.B = json_matrix(j.at("B"), d, "B");
  p.b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  p.w_star = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  if (j.contains("b"))
    for (std::size_t i = 0; i < d; ++i) p.b[static_cast<Eigen::Index>(i)] = j["b"].at(i).get<double>();
  if (j.contains("w_star"))
    for (std::size_t i = 0; i < d; ++i) p.w_star[static_cast<Eigen::Index>(i)] = j["w_star"].at(i).get<double>();
  p.gamma = j.value("gamma", p.gamma);
  p.n_beta = j.value("n_beta", p.n_beta);
  return p;
}

}  // namespace detail

inline std::vector<OracleScenario> oracle_scenarios_from_json(const nlohmann::json& doc) {
  std::vector<OracleScenario> out;
  try {
    for (const auto& j : doc.at("scenarios")) {
      OracleScenario s;
      s.name = j.at("name").get<std::string>();
      s.potential = detail::potential_from_json(j.at("potential"));
      s.potential.validate();
      s.quantity = j.value("quantity", s.quantity);
      s.sampler = j.value("sampler", s.sampler);
      if (s.quantity != "susceptibility" && s.quantity != "llc")
        throw ParseError("scenario '" + s.name + "': unknown quantity '" + s.quantity + "'");
      if (s.sampler != "exact" && s.sampler != "sgld")
        throw ParseError("scenario '" + s.name + "': unknown sampler '" + s.sampler + "'");
      s.chains = j.value("chains", s.chains);
      s.draws = j.value("draws", s.draws);
      s.seed = j.value("seed", s.seed);
      s.epsilon = j.value("epsilon", s.epsilon);
      s.burn_in = j.value("burn_in", s.burn_in);
      const auto& tol = j.at("tolerance");
      if (tol.contains("standard_errors")) s.tol_standard_errors = tol["standard_errors"].get<double>();
      if (tol.contains("relative")) s.tol_relative = tol["relative"].get<double>();
      if (!s.tol_standard_errors && !s.tol_relative)
        throw ParseError("scenario '" + s.name + "': tolerance needs standard_errors or relative");
      if (j.contains("expected")) s.expected = j["expected"].get<double>();
      s.expected_tolerance = j.value("expected_tolerance", s.expected_tolerance);
      if (s.chains < 2) throw ParseError("scenario '" + s.name + "': needs at least 2 chains");
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("oracle scenarios: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ParseError(std::string("oracle scenarios: ") + e.what());
  }
  if (out.empty()) throw ParseError("oracle scenarios: none defined");
  return out;
}

inline std::vector<OracleScenario> load_oracle_scenarios(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ConfigError("oracle scenarios '" + path.string() + "' do not exist");
  try {
    return oracle_scenarios_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const ParseError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline OracleResult run_oracle_scenario(const OracleScenario& s, const OracleOptions& opt = {}) {
  const auto& p = s.potential;
  std::vector<ChainTrace> traces;
  if (s.sampler == "exact") {
    for (std::size_t c = 0; c < s.chains; ++c) traces.push_back(exact_gaussian_samples(p, s.draws, s.seed + c));
  } else {
    QuadraticProblem prob(p);
    SGLDConfig cfg;
    cfg.epsilon = s.epsilon;
    cfg.gamma = p.gamma;
    cfg.n_beta = p.n_beta;
    cfg.batch_size = 1;
    cfg.n_draws = s.draws;
    cfg.n_chains = s.chains;
    cfg.burn_in = s.burn_in;
    cfg.seed = s.seed;
    traces = run_chains(prob, prob.w_star(), cfg);
  }
  OracleResult r;
  r.name = s.name;
  if (s.quantity == "susceptibility") {
    r.analytic = analytic_susceptibility(p);
    auto e = estimate_susceptibility_single(traces);
    r.measured = e.value;
    r.std_error = e.std_error;
  } else {
    r.analytic = analytic_llc(p);
    auto e = estimate_llc(traces, p.n_beta);
    r.measured = e.value;
    r.std_error = e.std_error;
  }
  if (opt.flip_sign) r.measured = -r.measured;
  r.error = std::abs(r.measured - r.analytic);
  r.bound = std::numeric_limits<double>::infinity();
  if (s.tol_standard_errors) r.bound = std::min(r.bound, *s.tol_standard_errors * r.std_error);
  if (s.tol_relative) r.bound = std::min(r.bound, *s.tol_relative * std::abs(r.analytic));
  if (s.expected) r.closed_form_ok = std::abs(r.analytic - *s.expected) <= s.expected_tolerance;
  r.pass = r.error <= r.bound && r.closed_form_ok;
  return r;
}

/// Runs every scenario, printing one line each; scenarios run on `workers`
/// threads with results reported in file order.
inline std::vector<OracleResult> run_oracle_check(const std::vector<OracleScenario>& scenarios, std::ostream& out,
                                                  const OracleOptions& opt = {}, std::size_t workers = 1) {
  std::vector<OracleResult> results(scenarios.size());
  auto errors = run_jobs(scenarios.size(), workers, [&](std::size_t i) { results[i] = run_oracle_scenario(scenarios[i], opt); });
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    auto& r = results[i];
    if (!errors[i].empty()) {
      r.name = scenarios[i].name;
      r.pass = false;
      out << "FAIL " << r.name << ": " << errors[i] << '\n';
      continue;
    }
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s %s: measured %.6g analytic %.6g error %.3g se %.3g bound %.3g%s\n",
                  r.pass ? "PASS" : "FAIL", r.name.c_str(), r.measured, r.analytic, r.error, r.std_error, r.bound,
                  r.closed_form_ok ? "" : " (closed form disagrees with fixture)");
    out << buf;
  }
  return results;
}

inline nlohmann::json to_json(const OracleResult& r) {
  return {{"name", r.name},   {"analytic", r.analytic}, {"measured", r.measured}, {"std_error", r.std_error},
          {"error", r.error}, {"bound", r.bound},       {"closed_form_ok", r.closed_form_ok}, {"pass", r.pass}};
}

// ---------------------------------------------------------------------------
// ingest

/// Reads one sequence per line, either a JSON array / {"tokens": [...]}
/// record or whitespace-separated token ids. With add_bos, BOS is prepended
/// to sequences that lack it.
inline Corpus ingest_corpus(const fs::path& input, std::size_t vocab_size, std::optional<TokenId> bos,
                            std::string id, bool add_bos = false) {
  std::ifstream is(input);
  if (!is) throw ParseError("ingest: cannot open '" + input.string() + "'");
  Corpus c;
  c.id = std::move(id);
  c.vocab_size = vocab_size;
  c.bos = bos.value_or(static_cast<TokenId>(vocab_size - 1));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    Sequence s;
    const std::string where = input.string() + " line " + std::to_string(lineno);
    if (line[first] == '[' || line[first] == '{') {
      try {
        auto j = nlohmann::json::parse(line);
        const auto& arr = j.is_object() ? j.at("tokens") : j;
        for (const auto& t : arr) {
          if (!t.is_number_integer() || t.get<std::int64_t>() < 0) throw ParseError("non-integer token");
          s.push_back(t.get<TokenId>());
        }
      } catch (const std::exception& e) {
        throw ParseError(where + ": " + e.what());
      }
    } else {
      std::istringstream ls(line);
      std::string tok;
      while (ls >> tok) {
        std::uint64_t v = 0;
        auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (ec != std::errc() || ptr != tok.data() + tok.size() || v > 0xffffffffull)
          throw ParseError(where + ": '" + tok + "' is not a token id");
        s.push_back(static_cast<TokenId>(v));
      }
    }
    if (add_bos && (s.empty() || s.front() != c.bos)) s.insert(s.begin(), c.bos);
    c.sequences.push_back(std::move(s));
  }
  if (c.sequences.empty()) throw ParseError("ingest: '" + input.string() + "' holds no sequences");
  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    throw ParseError(e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Synthetic experiment

struct SynthOptions {
  std::uint64_t seed = 0;
  std::size_t vocab_size = 128;
  std::size_t context_len = 16;
  std::size_t d_model = 16;
  std::size_t n_layers = 1;
  std::size_t n_heads = 2;
  std::size_t checkpoints = 2;
  std::size_t sequences = 512;
  double induction_rate = 0.2;
};

/// Writes toy checkpoints, a Markov base corpus, two probe corpora (planted
/// induction repeats and a shifted bigram distribution), a vocabulary and an
/// experiment.toml. Returns the config path.
inline fs::path write_synthetic_experiment(const fs::path& dir, const SynthOptions& o = {}) {
  fs::create_directories(dir / "model");
  fs::create_directories(dir / "corpora");
  ModelConfig mc;
  mc.vocab_size = o.vocab_size;
  mc.context_len = o.context_len;
  mc.d_model = o.d_model;
  mc.n_layers = o.n_layers;
  mc.n_heads = o.n_heads;
  const TokenId bos = mc.bos();
  std::vector<std::string> ckpts;
  for (std::size_t k = 0; k < o.checkpoints; ++k) {
    mc.seed = derive_seed(o.seed, {0xc4, k});
    const std::string name = "step" + std::to_string(k);
    save_checkpoint((dir / "model" / (name + ".ckpt")).string(), mc, init_model(mc));
    ckpts.push_back(name);
  }
  const auto decoder = toy_decoder(o.vocab_size);
  write_file_atomic(dir / "vocab.json", nlohmann::json(decoder.strings()).dump(1) + "\n");

  const auto base = markov_corpus("base", o.vocab_size, bos, random_transitions(o.vocab_size, bos, 4, 0.6, o.seed),
                                  o.sequences, o.context_len, derive_seed(o.seed, {1}));
  std::vector<TokenId> alphabet;
  for (TokenId t = 0; t < bos; ++t)
    if (matches_letters_only(decoder.decode(t))) alphabet.push_back(t);
  const auto induction = planted_induction_corpus("induction", o.vocab_size, bos, alphabet, o.sequences,
                                                  o.context_len, o.induction_rate, derive_seed(o.seed, {2}));
  const auto shifted = markov_corpus("shifted", o.vocab_size, bos,
                                     random_transitions(o.vocab_size, bos, 2, 0.9, derive_seed(o.seed, {3})),
                                     o.sequences, o.context_len, derive_seed(o.seed, {4}));
  auto save = [&](const std::string& name, const Corpus& c) {
    std::ostringstream os;
    write_corpus(os, c);
    write_file_atomic(dir / "corpora" / (name + ".jsonl"), os.str());
  };
  save("base", base);
  save("induction", induction.corpus);
  save("shifted", shifted);

  std::ostringstream t;
  t << "# Synthetic experiment: toy checkpoints, Markov base corpus, planted probes.\n";
  t << "seed = " << o.seed << "\n";
  t << "output_dir = \"out\"\n";
  t << "base_corpus = \"corpora/base.jsonl\"\n";
  t << "vocab = \"vocab.json\"\n";
  t << "components = \"all\"\n";
  t << "checkpoints = [";
  for (std::size_t k = 0; k < ckpts.size(); ++k)
    t << (k ? ", " : "") << "{ id = \"" << ckpts[k] << "\", path = \"model/" << ckpts[k] << ".ckpt\" }";
  t << "]\n";
  t << "probes = [{ id = \"induction\", path = \"corpora/induction.jsonl\" }, "
       "{ id = \"shifted\", path = \"corpora/shifted.jsonl\" }]\n";
  const auto path = dir / "experiment.toml";
  write_file_atomic(path, t.str());
  return path;
}

}  // namespace suscept
