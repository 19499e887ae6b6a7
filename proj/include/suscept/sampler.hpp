#pragma once

// Localized SGLD over exp{-n_beta * L_n(w) - gamma/2 * |w - w*|^2}.
//
// One step with gradient g of the batch loss at w:
//   w <- w - (eps/2) * (n_beta * g + gamma * (w - w*)) + N(0, eps I)
// restricted to the coordinates of a component mask when one is given.
//
// The sampler is generic over a SamplingProblem, which supplies the batch
// loss and gradient plus the observables recorded at each draw. Both the
// transformer and the quadratic oracle implement it.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <exception>
#include <functional>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "corpus.hpp"
#include "error.hpp"
#include "model.hpp"
#include "random.hpp"

namespace suscept {

enum class BatchMode { resample_each_step, fixed_per_chain };

inline std::string to_string(BatchMode m) {
  return m == BatchMode::resample_each_step ? "resample-each-step" : "fixed-per-chain";
}
inline BatchMode batch_mode_from_string(const std::string& s) {
  if (s == "resample-each-step") return BatchMode::resample_each_step;
  if (s == "fixed-per-chain") return BatchMode::fixed_per_chain;
  throw InvalidArgument("unknown batch_mode '" + s + "'");
}

struct SGLDConfig {
  double epsilon = 1e-3;
  double gamma = 300.0;
  double n_beta = 30.0;
  std::size_t batch_size = 64;
  std::size_t n_draws = 200;
  std::size_t n_chains = 4;
  std::size_t burn_in = 0;
  std::uint64_t seed = 0;
  bool noise_enabled = true;
  BatchMode batch_mode = BatchMode::resample_each_step;
  /// Mixed-loss batches reuse the base batch's indices instead of an
  /// independent draw. Requires equal-size base and mixed corpora.
  bool share_batch_indices = false;
  /// Controlled mode: L_mixed := (1 - dh) L_base + dh * mean(per-token probe
  /// losses) on the same draw.
  std::optional<double> controlled_delta_h;
  std::optional<double> w_star_loss_override;
  /// Abort when a loss exceeds factor * max(|L(w*)|, floor) or is non-finite.
  double divergence_factor = 10.0;
  double divergence_floor = 1.0;
  /// Threads used by run_chains.
  std::size_t workers = 1;

  static SGLDConfig per_token_defaults() {
    SGLDConfig c;
    c.n_draws = 100;
    c.batch_size = 16;
    return c;
  }

  void validate() const {
    detail::require(epsilon > 0.0 && std::isfinite(epsilon), "sgld: epsilon must be > 0");
    detail::require(gamma >= 0.0, "sgld: gamma must be >= 0");
    detail::require(n_beta > 0.0, "sgld: n_beta must be > 0");
    detail::require(batch_size >= 1, "sgld: batch_size must be >= 1");
    detail::require(n_draws >= 1, "sgld: n_draws must be >= 1");
    detail::require(n_chains >= 1, "sgld: n_chains must be >= 1");
    detail::require(divergence_factor > 0.0, "sgld: divergence_factor must be > 0");
    if (controlled_delta_h)
      detail::require(*controlled_delta_h >= 0.0 && *controlled_delta_h <= 1.0,
                      "sgld: controlled delta_h must lie in [0, 1]");
  }
};

struct Draw {
  double base_loss = 0.0;
  std::optional<double> mixed_loss;
  std::vector<double> per_token;
};

struct ChainTrace {
  std::vector<Draw> draws;
  double w_star_loss = 0.0;
  std::optional<ComponentMask> restricted;
  std::uint64_t seed = 0;
  std::optional<double> controlled_delta_h;

  std::size_t size() const { return draws.size(); }
  bool has_mixed() const { return !draws.empty() && draws.front().mixed_loss.has_value(); }
  bool has_per_token() const { return !draws.empty() && !draws.front().per_token.empty(); }
  std::size_t per_token_count() const { return draws.empty() ? 0 : draws.front().per_token.size(); }
};

/// Batch indices are drawn from [0, base_population()) and
/// [0, mixed_population()); a mixed population of 0 means no mixed loss.
template <class P>
concept SamplingProblem = requires(const P& p, std::span<const double> w, std::span<const std::size_t> idx,
                                   std::span<double> grad) {
  { p.dim() } -> std::convertible_to<std::size_t>;
  { p.base_population() } -> std::convertible_to<std::size_t>;
  { p.mixed_population() } -> std::convertible_to<std::size_t>;
  { p.has_probes() } -> std::convertible_to<bool>;
  { p.loss_and_grad(w, idx, grad) } -> std::convertible_to<double>;
  { p.mixed_loss(w, idx) } -> std::convertible_to<double>;
  { p.probe_losses(w) } -> std::convertible_to<std::vector<double>>;
};

/// Transformer posterior over a base corpus, with optional mixed corpus and
/// probe contexts for per-token losses.
class TransformerProblem {
 public:
  TransformerProblem(const Transformer& model, const Corpus& base, const Corpus* mixed = nullptr,
                     std::vector<Sequence> probes = {})
      : model_(&model), base_(&base), mixed_(mixed), probes_(std::move(probes)) {
    detail::require(!base.empty(), "TransformerProblem: base corpus is empty");
    if (mixed) detail::require(!mixed->empty(), "TransformerProblem: mixed corpus is empty");
    for (const auto& p : probes_) probe_views_.emplace_back(p);
  }

  std::size_t dim() const { return model_->dim(); }
  std::size_t base_population() const { return base_->size(); }
  std::size_t mixed_population() const { return mixed_ ? mixed_->size() : 0; }
  bool has_probes() const { return !probes_.empty(); }
  const std::vector<Sequence>& probes() const { return probes_; }

  double loss_and_grad(std::span<const double> w, std::span<const std::size_t> idx, std::span<double> grad) const {
    auto views = gather(*base_, idx);
    return model_->loss_and_grad(w, views, grad);
  }
  double mixed_loss(std::span<const double> w, std::span<const std::size_t> idx) const {
    detail::require(mixed_ != nullptr, "TransformerProblem: no mixed corpus");
    auto views = gather(*mixed_, idx);
    return model_->batch_loss(w, views);
  }
  std::vector<double> probe_losses(std::span<const double> w) const {
    std::vector<double> out;
    for (auto v : probe_views_) {
      auto l = model_->per_token_losses(w, v);
      out.insert(out.end(), l.begin(), l.end());
    }
    return out;
  }

 private:
  static std::vector<ContextView> gather(const Corpus& c, std::span<const std::size_t> idx) {
    std::vector<ContextView> v;
    v.reserve(idx.size());
    for (auto i : idx) v.emplace_back(c.sequences[i]);
    return v;
  }

  const Transformer* model_;
  const Corpus* base_;
  const Corpus* mixed_;
  std::vector<Sequence> probes_;
  std::vector<ContextView> probe_views_;
};

/// Called with (draw index, current weights) for every retained draw.
using DrawObserver = std::function<void(std::size_t, std::span<const double>)>;

template <SamplingProblem Problem>
ChainTrace sgld_chain(const Problem& problem, std::span<const double> w_star, const SGLDConfig& cfg,
                      const ComponentMask* mask = nullptr, const DrawObserver& observer = {}) {
  cfg.validate();
  const std::size_t d = problem.dim();
  detail::require(w_star.size() == d, "sgld_chain: w_star has wrong dimension");
  if (mask) detail::require(mask->size() == d, "sgld_chain: mask has wrong dimension");
  const bool with_mixed = problem.mixed_population() > 0;
  if (cfg.controlled_delta_h)
    detail::require(problem.has_probes(), "sgld_chain: controlled mode needs probe contexts");
  if (cfg.share_batch_indices && with_mixed)
    detail::require(problem.mixed_population() == problem.base_population(),
                    "sgld_chain: shared batch indices need equal-size base and mixed corpora");

  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < d; ++i)
    if (!mask || mask->test(i)) active.push_back(i);

  Rng base_rng = make_rng(cfg.seed, {1}), mixed_rng = make_rng(cfg.seed, {2}), noise_rng = make_rng(cfg.seed, {3});
  std::normal_distribution<double> normal(0.0, 1.0);
  const double half_eps = 0.5 * cfg.epsilon, noise_scale = std::sqrt(cfg.epsilon);

  std::vector<double> w(w_star.begin(), w_star.end()), grad(d, 0.0);
  std::vector<std::size_t> base_idx, mixed_idx;

  ChainTrace trace;
  trace.seed = cfg.seed;
  trace.controlled_delta_h = cfg.controlled_delta_h;
  if (mask) trace.restricted = *mask;
  trace.draws.reserve(cfg.n_draws);

  double ceiling = 0.0;
  auto guard = [&](double loss, std::size_t step, const char* what) {
    if (!std::isfinite(loss) || loss > ceiling)
      throw DivergenceError("sgld: " + std::string(what) + " loss " + std::to_string(loss) + " at step " +
                            std::to_string(step) + " exceeds ceiling " + std::to_string(ceiling) + " (seed " +
                            std::to_string(cfg.seed) + ")");
  };

  const std::size_t steps = cfg.burn_in + cfg.n_draws;
  for (std::size_t step = 0; step < steps; ++step) {
    if (step == 0 || cfg.batch_mode == BatchMode::resample_each_step) {
      base_idx = sample_indices(base_rng, problem.base_population(), cfg.batch_size);
      if (with_mixed)
        mixed_idx = cfg.share_batch_indices ? base_idx
                                            : sample_indices(mixed_rng, problem.mixed_population(), cfg.batch_size);
    }
    const double loss = problem.loss_and_grad(w, base_idx, grad);
    if (step == 0) {
      trace.w_star_loss = cfg.w_star_loss_override.value_or(loss);
      ceiling = cfg.divergence_factor * std::max(std::abs(trace.w_star_loss), cfg.divergence_floor);
    }
    guard(loss, step, "base");

    if (step >= cfg.burn_in) {
      Draw dr;
      dr.base_loss = loss;
      if (problem.has_probes()) {
        dr.per_token = problem.probe_losses(w);
        for (double l : dr.per_token) guard(l, step, "per-token");
      }
      if (cfg.controlled_delta_h) {
        double mean = 0.0;
        for (double l : dr.per_token) mean += l;
        mean /= static_cast<double>(dr.per_token.size());
        dr.mixed_loss = (1.0 - *cfg.controlled_delta_h) * loss + *cfg.controlled_delta_h * mean;
      } else if (with_mixed) {
        dr.mixed_loss = problem.mixed_loss(w, mixed_idx);
        guard(*dr.mixed_loss, step, "mixed");
      }
      if (observer) observer(trace.draws.size(), w);
      trace.draws.push_back(std::move(dr));
    }

    for (auto i : active) {
      double dw = -half_eps * (cfg.n_beta * grad[i] + cfg.gamma * (w[i] - w_star[i]));
      if (cfg.noise_enabled) dw += noise_scale * normal(noise_rng);
      w[i] += dw;
    }
  }
  return trace;
}

/// Chains with seeds cfg.seed + i, ordered by chain index whatever the
/// execution order.
template <SamplingProblem Problem>
std::vector<ChainTrace> run_chains(const Problem& problem, std::span<const double> w_star, const SGLDConfig& cfg,
                                   const ComponentMask* mask = nullptr) {
  cfg.validate();
  const std::size_t n = cfg.n_chains;
  std::vector<ChainTrace> out(n);
  std::vector<std::exception_ptr> errors(n);
  auto run_one = [&](std::size_t i) {
    try {
      SGLDConfig c = cfg;
      c.seed = cfg.seed + i;
      out[i] = sgld_chain(problem, w_star, c, mask);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) run_one(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < n; i += workers) run_one(i);
      });
    for (auto& th : pool) th.join();
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const DivergenceError& e) {
      throw DivergenceError("chain " + std::to_string(i) + ": " + e.what());
    } catch (const std::exception& e) {
      throw Error("chain " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON-lines trace files: one header record, then one record per draw.

namespace detail {

inline nlohmann::json mask_ranges(const ComponentMask& m) {
  auto ranges = nlohmann::json::array();
  std::size_t i = 0;
  while (i < m.size()) {
    if (!m.test(i)) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < m.size() && m.test(j)) ++j;
    ranges.push_back({i, j});
    i = j;
  }
  return ranges;
}

}  // namespace detail

inline void write_trace(std::ostream& os, const ChainTrace& t) {
  nlohmann::json header{{"type", "header"}, {"w_star_loss", t.w_star_loss}, {"seed", t.seed}, {"n_draws", t.size()}};
  if (t.restricted)
    header["restricted"] = {{"label", t.restricted->label}, {"dim", t.restricted->size()},
                            {"ranges", detail::mask_ranges(*t.restricted)}};
  if (t.controlled_delta_h) header["controlled_delta_h"] = *t.controlled_delta_h;
  os << header.dump() << '\n';
  for (std::size_t i = 0; i < t.draws.size(); ++i) {
    const auto& dr = t.draws[i];
    nlohmann::json j{{"type", "draw"}, {"t", i}, {"L_base", dr.base_loss}};
    if (dr.mixed_loss) j["L_mixed"] = *dr.mixed_loss;
    if (!dr.per_token.empty()) j["per_token"] = dr.per_token;
    os << j.dump() << '\n';
  }
}

inline ChainTrace read_trace(std::istream& is) {
  ChainTrace t;
  std::string line;
  bool have_header = false;
  try {
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      auto j = nlohmann::json::parse(line);
      const auto type = j.at("type").get<std::string>();
      if (type == "header") {
        have_header = true;
        t.w_star_loss = j.at("w_star_loss").get<double>();
        t.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("controlled_delta_h")) t.controlled_delta_h = j["controlled_delta_h"].get<double>();
        if (j.contains("restricted")) {
          const auto& r = j["restricted"];
          ComponentMask m{std::vector<std::uint8_t>(r.at("dim").get<std::size_t>(), 0),
                          r.at("label").get<std::string>()};
          for (const auto& rg : r.at("ranges"))
            for (std::size_t i = rg[0].get<std::size_t>(); i < rg[1].get<std::size_t>(); ++i) m.bits.at(i) = 1;
          t.restricted = std::move(m);
        }
      } else if (type == "draw") {
        Draw dr;
        dr.base_loss = j.at("L_base").get<double>();
        if (j.contains("L_mixed")) dr.mixed_loss = j["L_mixed"].get<double>();
        if (j.contains("per_token")) dr.per_token = j["per_token"].get<std::vector<double>>();
        t.draws.push_back(std::move(dr));
      } else {
        throw ParseError("unknown record type '" + type + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("trace: ") + e.what());
  } catch (const std::out_of_range& e) {
    throw ParseError(std::string("trace: ") + e.what());
  }
  if (!have_header) throw ParseError("trace: missing header record");
  return t;
}

}  // namespace suscept
