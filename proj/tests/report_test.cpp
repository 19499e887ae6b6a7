#include <gtest/gtest.h>

#include <regex>
#include <sstream>

#include "suscept/report.hpp"

using namespace suscept;

namespace {

PerTokenEstimate estimate(const std::string& comp, std::span<const Sequence> ctx, std::vector<double> values) {
  PerTokenEstimate e;
  e.component = comp;
  e.dataset = "probe";
  e.keys = token_keys(ctx);
  e.values = std::move(values);
  return e;
}

std::size_t count(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + 1)) ++n;
  return n;
}

}  // namespace

TEST(Color, QuadraticEndpoints) {
  EXPECT_EQ(color_for_susceptibility(0.0, 2.0, ColorScheme::quadratic), (ColorSpec{0, 255, 0, 0.0}));
  EXPECT_EQ(color_for_susceptibility(2.0, 2.0, ColorScheme::quadratic), (ColorSpec{0, 255, 0, 1.0}));
  EXPECT_EQ(color_for_susceptibility(-2.0, 2.0, ColorScheme::quadratic), (ColorSpec{255, 0, 0, 1.0}));
  EXPECT_EQ(color_for_susceptibility(-1.0, 2.0, ColorScheme::quadratic), (ColorSpec{255, 0, 0, 0.25}));
}

TEST(Color, LinearScheme) {
  EXPECT_EQ(color_for_susceptibility(1.0, 4.0, ColorScheme::linear), (ColorSpec{0, 128, 0, 0.25}));
  EXPECT_EQ(color_for_susceptibility(-4.0, 4.0, ColorScheme::linear), (ColorSpec{255, 0, 0, 1.0}));
}

TEST(Color, MonotoneAlphaAndSignOnlyHue) {
  for (auto scheme : {ColorScheme::quadratic, ColorScheme::linear}) {
    double prev = -1.0;
    for (int i = 0; i < 100; ++i) {
      const double chi = 3.0 * i / 99.0;
      const auto pos = color_for_susceptibility(chi, 3.0, scheme), neg = color_for_susceptibility(-chi, 3.0, scheme);
      EXPECT_GE(pos.alpha, prev);
      EXPECT_EQ(pos.alpha, neg.alpha);
      prev = pos.alpha;
      EXPECT_EQ(pos.g, scheme == ColorScheme::quadratic ? 255 : 128);
      if (chi > 0) EXPECT_EQ(neg.r, 255);
    }
  }
}

TEST(Color, Errors) {
  EXPECT_THROW(color_for_susceptibility(0.0, 0.0, ColorScheme::linear), InvalidArgument);
  EXPECT_THROW(color_for_susceptibility(1.5, 1.0, ColorScheme::linear), InvalidArgument);
  EXPECT_EQ(color_scheme_from_string("linear"), ColorScheme::linear);
  EXPECT_THROW(color_scheme_from_string("rainbow"), InvalidArgument);
}

TEST(Html, EscapesTokenText) {
  EXPECT_EQ(html_escape("<b a=\"x\">&'"), "&lt;b a=&quot;x&quot;&gt;&amp;&#39;");
  TokenDecoder dec({"<script>", "<|endoftext|>"});
  std::vector<Sequence> ctx{{1, 0}};
  std::vector<PerTokenEstimate> e{estimate("h", ctx, {0.5})};
  auto html = render_context_html(ctx, e, ColorScheme::quadratic, dec);
  EXPECT_EQ(html.find("<script>"), std::string::npos);
  EXPECT_NE(html.find("&lt;script&gt;"), std::string::npos);
}

TEST(Html, SingleZeroTokenIsTransparent) {
  TokenDecoder dec({"a", "<|endoftext|>"});
  std::vector<Sequence> ctx{{1, 0}};
  std::vector<PerTokenEstimate> e{estimate("h", ctx, {0.0})};
  auto html = render_context_html(ctx, e, ColorScheme::quadratic, dec);
  EXPECT_EQ(count(html, "class=\"bar\""), 1u);
  EXPECT_NE(html.find("background:rgba(0,255,0,0.000000)"), std::string::npos);
}

TEST(Html, StackedBarsInDeclaredOrderAndDeterministic) {
  TokenDecoder dec({"a", "b", "<|endoftext|>"});
  std::vector<Sequence> ctx{{2, 0, 1}, {2, 1}};
  std::vector<PerTokenEstimate> e{estimate("L0H0", ctx, {1.0, -1.0, 0.5}), estimate("L0H1", ctx, {-2.0, 0.0, 0.0}),
                                  estimate("L1H0", ctx, {0.0, 0.0, 2.0})};
  auto html = render_context_html(ctx, e, ColorScheme::quadratic, dec);
  EXPECT_EQ(count(html, "class=\"bar\""), 9u);
  EXPECT_EQ(html, render_context_html(ctx, e, ColorScheme::quadratic, dec));
  // First predicted token: bars for 1.0, -2.0, 0.0 with chi_max 2.
  const auto first = html.find("title=\"1 -2 0\"");
  ASSERT_NE(first, std::string::npos);
  const auto a = html.find("rgba(0,255,0,0.250000)", first), b = html.find("rgba(255,0,0,1.000000)", first),
             c = html.find("rgba(0,255,0,0.000000)", first);
  EXPECT_LT(a, b);
  EXPECT_LT(b, c);
  EXPECT_NE(html.find("components: L0H0 L0H1 L1H0"), std::string::npos);
}

TEST(Html, CoverageMismatch) {
  TokenDecoder dec({"a", "<|endoftext|>"});
  std::vector<Sequence> ctx{{1, 0, 0}};
  std::vector<Sequence> shorter{{1, 0}};
  std::vector<PerTokenEstimate> e{estimate("h", shorter, {0.1})};
  EXPECT_THROW(render_context_html(ctx, e, ColorScheme::linear, dec), InvalidArgument);
}

TEST(TopContexts, OneEachWayAndOrdering) {
  TokenDecoder dec({"a", "b", "c", "<|endoftext|>"});
  std::vector<Sequence> ctx{{3, 0, 1, 2, 0}, {3, 2, 2}};
  auto e = estimate("h", ctx, {0.1, 0.9, -0.3, 0.2, -1.0, 0.4});
  auto html = render_top_contexts(ctx, e, dec, 200, 1);
  EXPECT_EQ(count(html, "class=\"ctx\""), 2u);
  EXPECT_NE(html.find("data-value=\"0.90000000000000002\""), std::string::npos);
  EXPECT_NE(html.find("data-value=\"-1\""), std::string::npos);

  auto three = render_top_contexts(ctx, e, dec, 200, 3);
  std::regex re("data-value=\"([^\"]+)\"");
  std::vector<double> vals;
  for (auto it = std::sregex_iterator(three.begin(), three.end(), re); it != std::sregex_iterator(); ++it)
    vals.push_back(std::stod((*it)[1]));
  ASSERT_EQ(vals.size(), 6u);
  EXPECT_GT(vals[0], vals[1]);
  EXPECT_GT(vals[1], vals[2]);
  EXPECT_LT(vals[3], vals[4]);
}

TEST(TopContexts, WindowClipping) {
  TokenDecoder dec({"a", "<|endoftext|>"});
  std::vector<Sequence> ctx{{1, 0, 0, 0, 0, 0, 0, 0}};
  auto e = estimate("h", ctx, {0, 0, 0, 5, 0, 0, 0});
  auto wide = render_top_contexts(ctx, e, dec, 200, 1);
  auto narrow = render_top_contexts(ctx, e, dec, 1, 1);
  const auto top = wide.substr(wide.find("<h2>highest"), wide.find("<h2>lowest") - wide.find("<h2>highest"));
  EXPECT_EQ(count(top, "class=\"tok"), 8u);
  const auto ntop = narrow.substr(narrow.find("<h2>highest"), narrow.find("<h2>lowest") - narrow.find("<h2>highest"));
  EXPECT_EQ(count(ntop, "class=\"tok"), 3u);
  EXPECT_EQ(count(ntop, "tok feat"), 1u);
}

TEST(TopContexts, Errors) {
  TokenDecoder dec({"a", "<|endoftext|>"});
  std::vector<Sequence> ctx{{1, 0}};
  auto e = estimate("h", ctx, {0.3});
  EXPECT_THROW(render_top_contexts(ctx, e, dec, 5, 2), InvalidArgument);
  PerTokenEstimate empty;
  EXPECT_THROW(render_top_contexts(ctx, empty, dec, 5, 1), InvalidArgument);
}

TEST(Csv, PerTokenExport) {
  std::vector<Sequence> ctx{{9, 4, 5}};
  std::vector<PerTokenEstimate> e{estimate("0:1", ctx, {0.5, -0.25})};
  std::stringstream ss;
  write_per_token_csv(ss, e);
  EXPECT_EQ(ss.str(), "dataset,context,position,token,component,chi\nprobe,0,1,4,0:1,0.5\nprobe,0,2,5,0:1,-0.25\n");
}
