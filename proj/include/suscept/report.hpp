#pragma once

// Per-token susceptibility heatmaps as self-contained HTML.
//
// Quadratic scheme: chi >= 0 -> (0,255,0), chi < 0 -> (255,0,0), alpha
// (|chi|/chi_max)^2. Linear scheme: chi >= 0 -> (0,128,0), chi < 0 ->
// (255,0,0), alpha |chi|/chi_max. Zero takes the positive branch at alpha 0.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"
#include "estimators.hpp"
#include "io.hpp"
#include "patterns.hpp"

namespace suscept {

enum class ColorScheme { quadratic, linear };

inline std::string to_string(ColorScheme s) { return s == ColorScheme::quadratic ? "quadratic" : "linear"; }
inline ColorScheme color_scheme_from_string(const std::string& s) {
  if (s == "quadratic") return ColorScheme::quadratic;
  if (s == "linear") return ColorScheme::linear;
  throw InvalidArgument("unknown color scheme '" + s + "'");
}

struct ColorSpec {
  int r = 0, g = 0, b = 0;
  double alpha = 0.0;

  bool operator==(const ColorSpec&) const = default;

  std::string css() const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "rgba(%d,%d,%d,%.6f)", r, g, b, alpha);
    return buf;
  }
};

inline ColorSpec color_for_susceptibility(double chi, double chi_max, ColorScheme scheme) {
  detail::require(chi_max > 0.0 && std::isfinite(chi_max), "color_for_susceptibility: chi_max must be > 0");
  detail::require(std::isfinite(chi) && std::abs(chi) <= chi_max,
                  "color_for_susceptibility: |chi| exceeds chi_max");
  const double ratio = std::abs(chi) / chi_max;
  if (scheme == ColorScheme::quadratic) {
    if (chi >= 0.0) return {0, 255, 0, ratio * ratio};
    return {255, 0, 0, ratio * ratio};
  }
  if (chi >= 0.0) return {0, 128, 0, ratio};
  return {255, 0, 0, ratio};
}

inline std::string html_escape(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

namespace detail {

inline constexpr std::string_view kHtmlHead =
    "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{TITLE}</title>\n"
    "<style>\n"
    "body{font-family:monospace;line-height:1.2;}\n"
    ".tok{display:inline-block;vertical-align:top;white-space:pre;margin:0 1px 4px 0;}\n"
    ".bar{display:block;height:5px;}\n"
    ".feat{outline:1px solid #000;}\n"
    ".ctx{margin:0 0 12px 0;}\n"
    "</style></head><body>\n";

inline std::string html_head(std::string_view title) {
  std::string h(kHtmlHead);
  h.replace(h.find("{TITLE}"), 7, html_escape(title));
  return h;
}

using ValueIndex = std::map<std::pair<std::size_t, std::size_t>, double>;

inline ValueIndex index_values(const PerTokenEstimate& e) {
  require(e.keys.size() == e.values.size() && !e.keys.empty(), "report: per-token estimate has no token keys");
  ValueIndex m;
  for (std::size_t i = 0; i < e.keys.size(); ++i) m[{e.keys[i].context, e.keys[i].position}] = e.values[i];
  return m;
}

/// chi_max over a set, with 1 standing in when every value is 0 (all alphas
/// are then 0).
inline double chi_max_of(std::span<const PerTokenEstimate> ests) {
  double m = 0.0;
  for (const auto& e : ests)
    for (double v : e.values) m = std::max(m, std::abs(v));
  return m > 0.0 ? m : 1.0;
}

inline void write_token(std::ostream& os, const std::string& text, std::span<const double> chis, double chi_max,
                        ColorScheme scheme, bool featured) {
  os << "<span class=\"tok" << (featured ? " feat" : "") << "\"";
  if (!chis.empty()) {
    os << " title=\"";
    for (std::size_t i = 0; i < chis.size(); ++i) os << (i ? " " : "") << format_double(chis[i]);
    os << "\"";
  }
  os << ">" << html_escape(text);
  for (double c : chis)
    os << "<span class=\"bar\" style=\"background:" << color_for_susceptibility(c, chi_max, scheme).css()
       << "\"></span>";
  os << "</span>";
}

}  // namespace detail

/// Every token of every context with one stacked bar per component, in the
/// order of `per_component`. BOS positions carry no bars.
inline std::string render_context_html(std::span<const Sequence> contexts,
                                       std::span<const PerTokenEstimate> per_component, ColorScheme scheme,
                                       const TokenDecoder& decoder, std::string_view title = "susceptibility") {
  detail::require(!per_component.empty(), "render_context_html: no components");
  std::vector<detail::ValueIndex> idx;
  for (const auto& e : per_component) idx.push_back(detail::index_values(e));
  for (std::size_t c = 0; c < contexts.size(); ++c)
    for (std::size_t p = 1; p < contexts[c].size(); ++p)
      for (std::size_t k = 0; k < idx.size(); ++k)
        detail::require(idx[k].count({c, p}) == 1, "render_context_html: component '" + per_component[k].component +
                                                       "' lacks context " + std::to_string(c) + " position " +
                                                       std::to_string(p));
  const double chi_max = detail::chi_max_of(per_component);
  std::ostringstream os;
  os << detail::html_head(title);
  os << "<p>components:";
  for (const auto& e : per_component) os << ' ' << html_escape(e.component);
  os << "; scheme " << to_string(scheme) << "; chi_max " << format_double(chi_max) << "</p>\n";
  std::vector<double> chis(idx.size());
  for (std::size_t c = 0; c < contexts.size(); ++c) {
    os << "<div class=\"ctx\" id=\"ctx" << c << "\">";
    for (std::size_t p = 0; p < contexts[c].size(); ++p) {
      const auto& text = decoder.decode(contexts[c][p]);
      if (p == 0) {
        detail::write_token(os, text, {}, chi_max, scheme, false);
        continue;
      }
      for (std::size_t k = 0; k < idx.size(); ++k) chis[k] = idx[k].at({c, p});
      detail::write_token(os, text, chis, chi_max, scheme, false);
    }
    os << "</div>\n";
  }
  os << "</body></html>\n";
  return os.str();
}

/// The top_k highest and top_k lowest tokens of one estimate, each shown in a
/// window of +-`window` positions clipped to its context.
inline std::string render_top_contexts(std::span<const Sequence> contexts, const PerTokenEstimate& per_token,
                                       const TokenDecoder& decoder, std::size_t window = 200, std::size_t top_k = 10,
                                       ColorScheme scheme = ColorScheme::quadratic) {
  detail::require(!per_token.values.empty(), "render_top_contexts: empty per-token estimate");
  const auto index = detail::index_values(per_token);
  detail::require(top_k >= 1 && top_k <= per_token.values.size(),
                  "render_top_contexts: top_k must lie in [1, " + std::to_string(per_token.values.size()) + "]");
  std::vector<std::size_t> order(per_token.values.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return per_token.values[a] > per_token.values[b]; });
  const double chi_max = detail::chi_max_of(std::span(&per_token, 1));

  std::ostringstream os;
  os << detail::html_head("top tokens: " + per_token.component);
  auto section = [&](const char* name, auto first, auto last) {
    os << "<h2>" << name << "</h2>\n";
    for (auto it = first; it != last; ++it) {
      const auto& key = per_token.keys[*it];
      detail::require(key.context < contexts.size(), "render_top_contexts: context index out of range");
      const auto& ctx = contexts[key.context];
      const std::size_t lo = key.position > window ? key.position - window : 0;
      const std::size_t hi = std::min(ctx.size(), key.position + window + 1);
      os << "<div class=\"ctx\" data-value=\"" << format_double(per_token.values[*it]) << "\">";
      for (std::size_t p = lo; p < hi; ++p) {
        auto v = index.find({key.context, p});
        std::vector<double> chis;
        if (v != index.end()) chis.push_back(v->second);
        detail::write_token(os, decoder.decode(ctx[p]), chis, chi_max, scheme, p == key.position);
      }
      os << "</div>\n";
    }
  };
  section("highest", order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_k));
  section("lowest", order.rbegin(), order.rbegin() + static_cast<std::ptrdiff_t>(top_k));
  os << "</body></html>\n";
  return os.str();
}

/// context, position, token, component, chi for every estimate.
inline void write_per_token_csv(std::ostream& os, std::span<const PerTokenEstimate> ests) {
  os << "dataset,context,position,token,component,chi\n";
  for (const auto& e : ests) {
    detail::require(e.keys.size() == e.values.size(), "write_per_token_csv: estimate has no token keys");
    for (std::size_t i = 0; i < e.values.size(); ++i)
      os << csv_field(e.dataset) << ',' << e.keys[i].context << ',' << e.keys[i].position << ',' << e.keys[i].token
         << ',' << csv_field(e.component) << ',' << format_double(e.values[i]) << '\n';
  }
}

}  // namespace suscept
