#pragma once

// Estimators over SGLD traces.
//
// With phi_t = L_base(w_t) - L(w*) from the restricted chain, dL_t the loss
// difference on the restricted draws and dL'_t the same on the full chain,
//
//   chi = -(1/r) sum_t phi_t dL_t + (1/r^2) (sum_t phi_t) (sum_t dL'_t)
//
// computed per chain pair and averaged over chains. For the per-token variant
// dL is l_(x,y)(w) - L_base(w). Standard errors are across chains only.

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "io.hpp"
#include "sampler.hpp"

namespace suscept {

struct ChainSummary {
  double mean = 0.0;
  double std_error = std::numeric_limits<double>::quiet_NaN();
  bool std_error_defined = false;
};

/// Mean and sample-std / sqrt(n); the error is undefined for one chain.
/// Sums run in sorted order so the result does not depend on chain order.
inline ChainSummary summarize_chains(std::span<const double> values) {
  detail::require(!values.empty(), "summarize_chains: no chains");
  std::vector<double> per_chain(values.begin(), values.end());
  std::sort(per_chain.begin(), per_chain.end());
  ChainSummary s;
  for (double v : per_chain) s.mean += v;
  s.mean /= static_cast<double>(per_chain.size());
  if (per_chain.size() >= 2) {
    double ss = 0.0;
    for (double v : per_chain) ss += (v - s.mean) * (v - s.mean);
    const double n = static_cast<double>(per_chain.size());
    s.std_error = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
    s.std_error_defined = true;
  }
  return s;
}

struct SusceptibilityEstimate {
  double value = 0.0;
  std::vector<double> per_chain;
  double std_error = std::numeric_limits<double>::quiet_NaN();
  bool std_error_defined = false;
  std::string component;
  std::string probe;
  double delta_h = 0.0;
  std::optional<double> controlled_delta_h;
};

struct TokenKey {
  std::size_t context = 0;
  std::size_t position = 0;  // index of the predicted token within its context
  TokenId token = 0;
  bool operator==(const TokenKey&) const = default;
};

struct PerTokenEstimate {
  std::vector<double> values;                  // one per predicted position, chain-averaged
  std::vector<std::vector<double>> per_chain;  // [chain][position]
  std::vector<TokenKey> keys;                  // empty if contexts were not supplied
  std::string component;
  std::string dataset;
  std::optional<double> controlled_delta_h;

  std::size_t size() const { return values.size(); }
};

struct LLCEstimate {
  double value = 0.0;
  std::vector<double> per_chain;
  double std_error = std::numeric_limits<double>::quiet_NaN();
  bool std_error_defined = false;
};

/// Keys for every predicted position of every context, in trace order.
inline std::vector<TokenKey> token_keys(std::span<const Sequence> contexts) {
  std::vector<TokenKey> keys;
  for (std::size_t c = 0; c < contexts.size(); ++c)
    for (std::size_t p = 1; p < contexts[c].size(); ++p) keys.push_back({c, p, contexts[c][p]});
  return keys;
}

namespace detail {

inline void check_pair(const ChainTrace& restricted, const ChainTrace& full) {
  require(restricted.size() == full.size(), "estimator: draw-count mismatch (" + std::to_string(restricted.size()) +
                                                " restricted vs " + std::to_string(full.size()) + " full)");
  require(restricted.size() >= 1, "estimator: empty trace");
}

inline void check_chain_lists(std::size_t restricted, std::size_t full) {
  require(restricted >= 1, "estimator: no chains");
  require(restricted == full, "estimator: chain-count mismatch (" + std::to_string(restricted) + " restricted vs " +
                                  std::to_string(full) + " full)");
}

inline std::optional<double> common_control(std::span<const ChainTrace> a, std::span<const ChainTrace> b) {
  std::optional<double> dh = a.front().controlled_delta_h;
  for (auto* list : {&a, &b})
    for (const auto& t : *list)
      if (t.controlled_delta_h != dh) return std::nullopt;
  return dh;
}

}  // namespace detail

/// Single chain-pair susceptibility estimate.
inline double chain_susceptibility(const ChainTrace& restricted, const ChainTrace& full) {
  detail::check_pair(restricted, full);
  detail::require(restricted.has_mixed() && full.has_mixed(), "estimate_susceptibility: trace lacks L_mixed");
  const double r = static_cast<double>(restricted.size());
  double cross = 0.0, phi_sum = 0.0, dl_full = 0.0;
  for (std::size_t t = 0; t < restricted.size(); ++t) {
    const auto& dr = restricted.draws[t];
    const double phi = dr.base_loss - restricted.w_star_loss;
    cross += phi * (dr.mixed_loss.value() - dr.base_loss);
    phi_sum += phi;
    const auto& df = full.draws[t];
    dl_full += df.mixed_loss.value() - df.base_loss;
  }
  return -cross / r + phi_sum * dl_full / (r * r);
}

inline SusceptibilityEstimate estimate_susceptibility(std::span<const ChainTrace> restricted,
                                                      std::span<const ChainTrace> full, std::string component = {},
                                                      std::string probe = {}, double delta_h = 0.0) {
  detail::check_chain_lists(restricted.size(), full.size());
  SusceptibilityEstimate e;
  for (std::size_t c = 0; c < restricted.size(); ++c) e.per_chain.push_back(chain_susceptibility(restricted[c], full[c]));
  const auto s = summarize_chains(e.per_chain);
  e.value = s.mean;
  e.std_error = s.std_error;
  e.std_error_defined = s.std_error_defined;
  e.component = std::move(component);
  e.probe = std::move(probe);
  e.delta_h = delta_h;
  e.controlled_delta_h = detail::common_control(restricted, full);
  return e;
}

/// Single-sample-set form: the same draws serve both terms.
inline SusceptibilityEstimate estimate_susceptibility_single(std::span<const ChainTrace> traces,
                                                             std::string component = {}, std::string probe = {},
                                                             double delta_h = 0.0) {
  return estimate_susceptibility(traces, traces, std::move(component), std::move(probe), delta_h);
}

inline std::vector<double> chain_per_token(const ChainTrace& restricted, const ChainTrace& full) {
  detail::check_pair(restricted, full);
  detail::require(restricted.has_per_token() && full.has_per_token(), "estimate_per_token: missing per-token records");
  const std::size_t n = restricted.per_token_count();
  detail::require(full.per_token_count() == n, "estimate_per_token: per-token count mismatch");
  const double r = static_cast<double>(restricted.size());
  std::vector<double> cross(n, 0.0), dl_full(n, 0.0);
  double phi_sum = 0.0;
  for (std::size_t t = 0; t < restricted.size(); ++t) {
    const auto& dr = restricted.draws[t];
    const auto& df = full.draws[t];
    detail::require(dr.per_token.size() == n && df.per_token.size() == n, "estimate_per_token: ragged per-token records");
    const double phi = dr.base_loss - restricted.w_star_loss;
    phi_sum += phi;
    for (std::size_t i = 0; i < n; ++i) {
      cross[i] += phi * (dr.per_token[i] - dr.base_loss);
      dl_full[i] += df.per_token[i] - df.base_loss;
    }
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = -cross[i] / r + phi_sum * dl_full[i] / (r * r);
  return out;
}

inline PerTokenEstimate estimate_per_token(std::span<const ChainTrace> restricted, std::span<const ChainTrace> full,
                                           std::span<const Sequence> contexts = {}, std::string component = {},
                                           std::string dataset = {}) {
  detail::check_chain_lists(restricted.size(), full.size());
  PerTokenEstimate e;
  for (std::size_t c = 0; c < restricted.size(); ++c) e.per_chain.push_back(chain_per_token(restricted[c], full[c]));
  const std::size_t n = e.per_chain.front().size();
  e.values.assign(n, 0.0);
  for (const auto& pc : e.per_chain)
    for (std::size_t i = 0; i < n; ++i) e.values[i] += pc[i];
  for (auto& v : e.values) v /= static_cast<double>(e.per_chain.size());
  if (!contexts.empty()) {
    e.keys = token_keys(contexts);
    detail::require(e.keys.size() == n, "estimate_per_token: contexts do not match the per-token records");
  }
  e.component = std::move(component);
  e.dataset = std::move(dataset);
  e.controlled_delta_h = detail::common_control(restricted, full);
  return e;
}

/// |chi - dh * mean(chi_(x,y))|. Only meaningful (and only accepted) when both
/// estimates come from controlled-mode traces with the same delta_h, where it
/// vanishes up to rounding.
inline double aggregate_identity_check(const SusceptibilityEstimate& sus, const PerTokenEstimate& per_token,
                                       double delta_h) {
  detail::require(sus.controlled_delta_h.has_value() && per_token.controlled_delta_h.has_value(),
                  "aggregate_identity_check: estimates are not from controlled-mode traces");
  detail::require(*sus.controlled_delta_h == delta_h && *per_token.controlled_delta_h == delta_h,
                  "aggregate_identity_check: traces were controlled with a different delta_h");
  detail::require(!per_token.values.empty(), "aggregate_identity_check: empty per-token estimate");
  double mean = 0.0;
  for (double v : per_token.values) mean += v;
  mean /= static_cast<double>(per_token.values.size());
  return std::abs(sus.value - delta_h * mean);
}

/// lambda = n_beta * (mean_t L_base(w_t) - L(w*)), per chain then averaged.
inline LLCEstimate estimate_llc(std::span<const ChainTrace> traces, double n_beta) {
  detail::require(!traces.empty(), "estimate_llc: no chains");
  LLCEstimate e;
  for (const auto& t : traces) {
    detail::require(t.size() >= 1, "estimate_llc: empty trace");
    double mean = 0.0;
    for (const auto& d : t.draws) mean += d.base_loss;
    mean /= static_cast<double>(t.size());
    e.per_chain.push_back(n_beta * (mean - t.w_star_loss));
  }
  const auto s = summarize_chains(e.per_chain);
  e.value = s.mean;
  e.std_error = s.std_error;
  e.std_error_defined = s.std_error_defined;
  return e;
}

/// (1 / n_beta^2) (1 / dh) (lambda_mixed - lambda_base).
inline double finite_diff_susceptibility(const LLCEstimate& llc_mixed, const LLCEstimate& llc_base, double n_beta,
                                         double delta_h) {
  detail::require(delta_h != 0.0, "finite_diff_susceptibility: delta_h must be nonzero");
  detail::require(n_beta > 0.0, "finite_diff_susceptibility: n_beta must be > 0");
  return (llc_mixed.value - llc_base.value) / (n_beta * n_beta * delta_h);
}

// ---------------------------------------------------------------------------
// Export

inline void write_estimates_csv(std::ostream& os, std::span<const SusceptibilityEstimate> estimates) {
  os << "component,probe,delta_h,value,std_error\n";
  for (const auto& e : estimates)
    os << csv_field(e.component) << ',' << csv_field(e.probe) << ',' << format_double(e.delta_h) << ','
       << format_double(e.value) << ',' << format_double(e.std_error_defined ? e.std_error : std::nan("")) << '\n';
}

inline nlohmann::json to_json(const SusceptibilityEstimate& e) {
  nlohmann::json j{{"component", e.component}, {"probe", e.probe},       {"delta_h", e.delta_h},
                   {"value", e.value},         {"per_chain", e.per_chain}, {"std_error", nullptr}};
  if (e.std_error_defined) j["std_error"] = e.std_error;
  return j;
}

inline SusceptibilityEstimate susceptibility_from_json(const nlohmann::json& j) {
  SusceptibilityEstimate e;
  e.component = j.at("component").get<std::string>();
  e.probe = j.at("probe").get<std::string>();
  e.delta_h = j.at("delta_h").get<double>();
  e.value = j.at("value").get<double>();
  e.per_chain = j.at("per_chain").get<std::vector<double>>();
  if (!j.at("std_error").is_null()) {
    e.std_error = j["std_error"].get<double>();
    e.std_error_defined = true;
  }
  return e;
}

inline nlohmann::json to_json(const LLCEstimate& e) {
  nlohmann::json j{{"value", e.value}, {"per_chain", e.per_chain}, {"std_error", nullptr}};
  if (e.std_error_defined) j["std_error"] = e.std_error;
  return j;
}

/// One record per predicted position: dataset, context, position, token,
/// component, value.
inline void write_per_token_jsonl(std::ostream& os, const PerTokenEstimate& e) {
  detail::require(e.keys.size() == e.values.size(), "write_per_token_jsonl: estimate has no token keys");
  for (std::size_t i = 0; i < e.values.size(); ++i) {
    const auto& k = e.keys[i];
    nlohmann::json j{{"dataset", e.dataset}, {"context", k.context}, {"position", k.position},
                     {"token", k.token},     {"component", e.component}, {"value", e.values[i]}};
    os << j.dump() << '\n';
  }
}

struct PerTokenRecord {
  std::string dataset;
  std::string component;
  TokenKey key;
  double value = 0.0;
};

inline std::vector<PerTokenRecord> read_per_token_jsonl(std::istream& is) {
  std::vector<PerTokenRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back({j.at("dataset").get<std::string>(), j.at("component").get<std::string>(),
                     {j.at("context").get<std::size_t>(), j.at("position").get<std::size_t>(),
                      j.at("token").get<TokenId>()},
                     j.at("value").get<double>()});
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError("per-token line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

}  // namespace suscept
