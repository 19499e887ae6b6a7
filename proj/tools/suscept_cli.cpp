// suscept: command-line driver for susceptibility experiments.
//
// Exit status: 0 success, 1 a cell or scenario failed, 2 configuration error.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "suscept/pipeline.hpp"

namespace fs = std::filesystem;
using namespace suscept;

namespace {

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
  std::optional<std::size_t> workers;
  std::optional<std::string> output;
  std::optional<std::uint64_t> seed;
};

void add_config_args(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("config", a.path, "Experiment TOML file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", a.overrides, "Override a config key, e.g. --set sgld.draws=50")->take_all();
  cmd->add_option("--workers", a.workers, "Worker threads for grid cells");
  cmd->add_option("--output", a.output, "Output directory");
  cmd->add_option("--seed", a.seed, "Global seed");
}

ExperimentConfig build_config(const ConfigArgs& a) {
  auto o = a.overrides;
  if (a.workers) o.push_back("workers=" + std::to_string(*a.workers));
  if (a.seed) o.push_back("seed=" + std::to_string(*a.seed));
  if (a.output) {
    std::string q = "\"";
    for (char c : fs::absolute(*a.output).string()) {
      if (c == '"' || c == '\\') q += '\\';
      q += c;
    }
    o.push_back("output_dir=" + q + "\"");
  }
  return load_config(a.path, o);
}

int report_failures(const CommandResult& r) {
  for (const auto& f : r.failures) std::cerr << "FAILED " << f << '\n';
  return r.exit_code();
}

using Command = CommandResult (*)(const ExperimentConfig&, std::ostream&);

int run_command(const ConfigArgs& a, const std::string& name, const std::vector<std::pair<std::string, Command>>& steps) {
  const auto cfg = build_config(a);
  int code = 0;
  for (const auto& [step, fn] : steps) {
    const auto r = fn(cfg, std::cerr);
    code = std::max(code, report_failures(r));
    write_manifest(cfg, step);
    if (code != 0) break;
  }
  std::cerr << name << ": outputs in " << cfg.output_dir.string() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Susceptibility estimation for small attention-only transformers"};
  app.require_subcommand(1);

  ConfigArgs estimate_args, per_token_args, pca_args, trajectory_args, report_args, all_args;
  auto* estimate = app.add_subcommand("estimate", "Susceptibility grid over checkpoints x probes x components");
  add_config_args(estimate, estimate_args);
  auto* per_token = app.add_subcommand("per-token", "Per-token susceptibilities over sampled probe contexts");
  add_config_args(per_token, per_token_args);
  auto* pca_cmd = app.add_subcommand("pca", "PCA of the per-token (or grid) response matrix");
  add_config_args(pca_cmd, pca_args);
  auto* trajectory = app.add_subcommand("trajectory", "Joint PCA of grid estimates across checkpoints");
  add_config_args(trajectory, trajectory_args);
  auto* report = app.add_subcommand("report", "HTML heatmaps and per-token CSV");
  add_config_args(report, report_args);
  auto* all = app.add_subcommand("all", "estimate, per-token, pca, trajectory (with 2+ checkpoints) and report");
  add_config_args(all, all_args);

  std::string scenarios = "data/oracle_scenarios.json";
  std::optional<std::string> oracle_json;
  bool flip_sign = false;
  std::size_t oracle_workers = 1;
  auto* oracle = app.add_subcommand("oracle-check", "Estimators against closed-form Gaussian scenarios");
  oracle->add_option("--scenarios", scenarios, "Scenario JSON file")->capture_default_str();
  oracle->add_option("--json", oracle_json, "Write results as JSON");
  oracle->add_option("--workers", oracle_workers, "Worker threads");
  oracle->add_flag("--flip-sign", flip_sign, "Negate every estimate (mutation check)")->group("");

  std::string ingest_in, ingest_out, ingest_id = "corpus";
  std::optional<std::string> bigrams;
  std::size_t vocab_size = 0;
  std::optional<TokenId> bos;
  bool add_bos = false;
  auto* ingest = app.add_subcommand("ingest", "Validate a tokenized corpus and write canonical JSON lines");
  ingest->add_option("--input", ingest_in, "JSON-lines or whitespace-separated token ids")->required();
  ingest->add_option("--output", ingest_out, "Canonical JSON-lines corpus")->required();
  ingest->add_option("--vocab-size", vocab_size, "Vocabulary size")->required();
  ingest->add_option("--bos", bos, "BOS token id (default vocab-size - 1)");
  ingest->add_option("--id", ingest_id, "Corpus id");
  ingest->add_option("--bigrams", bigrams, "Also write bigram statistics CSV");
  ingest->add_flag("--add-bos", add_bos, "Prepend BOS where missing");

  std::string synth_dir;
  SynthOptions synth_opt;
  auto* synth = app.add_subcommand("synth", "Write a synthetic experiment (toy checkpoints, corpora, config)");
  synth->add_option("--output", synth_dir, "Directory to create")->required();
  synth->add_option("--seed", synth_opt.seed);
  synth->add_option("--vocab-size", synth_opt.vocab_size)->capture_default_str();
  synth->add_option("--context-len", synth_opt.context_len)->capture_default_str();
  synth->add_option("--d-model", synth_opt.d_model)->capture_default_str();
  synth->add_option("--layers", synth_opt.n_layers)->capture_default_str();
  synth->add_option("--heads", synth_opt.n_heads)->capture_default_str();
  synth->add_option("--checkpoints", synth_opt.checkpoints)->capture_default_str();
  synth->add_option("--sequences", synth_opt.sequences)->capture_default_str();

  auto* init = app.add_subcommand("init-config", "Print the default experiment config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*estimate) return run_command(estimate_args, "estimate", {{"estimate", cmd_estimate}});
    if (*per_token) return run_command(per_token_args, "per-token", {{"per-token", cmd_per_token}});
    if (*pca_cmd) return run_command(pca_args, "pca", {{"pca", cmd_pca}});
    if (*trajectory) return run_command(trajectory_args, "trajectory", {{"trajectory", cmd_trajectory}});
    if (*report) return run_command(report_args, "report", {{"report", cmd_report}});
    if (*all) {
      std::vector<std::pair<std::string, Command>> steps{
          {"estimate", cmd_estimate}, {"per-token", cmd_per_token}, {"pca", cmd_pca}};
      if (build_config(all_args).checkpoints.size() >= 2) steps.emplace_back("trajectory", cmd_trajectory);
      steps.emplace_back("report", cmd_report);
      return run_command(all_args, "all", steps);
    }
    if (*oracle) {
      const auto list = load_oracle_scenarios(scenarios);
      const auto results = run_oracle_check(list, std::cout, OracleOptions{flip_sign}, oracle_workers);
      std::size_t failed = 0;
      auto arr = nlohmann::json::array();
      for (const auto& r : results) {
        failed += !r.pass;
        arr.push_back(to_json(r));
      }
      if (oracle_json) write_file_atomic(*oracle_json, arr.dump(2) + "\n");
      std::cout << results.size() - failed << " of " << results.size() << " scenarios passed\n";
      return failed ? 1 : 0;
    }
    if (*ingest) {
      Corpus c;
      try {
        c = ingest_corpus(ingest_in, vocab_size, bos, ingest_id, add_bos);
      } catch (const ParseError& e) {
        throw ConfigError(e.what());
      }
      std::ostringstream os;
      write_corpus(os, c);
      write_file_atomic(ingest_out, os.str());
      if (bigrams) {
        std::ostringstream bs;
        bigram_stats(c).write_csv(bs);
        write_file_atomic(*bigrams, bs.str());
      }
      std::cerr << "ingest: " << c.size() << " sequences, " << c.predicted_positions() << " predicted positions\n";
      return 0;
    }
    if (*synth) {
      const auto path = write_synthetic_experiment(synth_dir, synth_opt);
      std::cerr << "synth: wrote " << path.string() << '\n';
      return 0;
    }
    if (*init) {
      std::cout << default_config_toml();
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
