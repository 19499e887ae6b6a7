#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "pattern_cases.hpp"
#include "suscept/patterns.hpp"

using namespace suscept;
using namespace suscept::testing;

namespace {

std::string data_dir() {
  const char* d = std::getenv("SUSCEPT_DATA_DIR");
  return d ? d : "data";
}

// Single-token classification outside any bigram or repeat context.
LabelSet classify_alone(const std::string& s) {
  TokenDecoder dec({"<|endoftext|>", s});
  Sequence ctx{0, 1};
  BigramStats stats;
  return classify_token(ctx, 1, stats, dec);
}

}  // namespace

TEST(PatternTable, DataFileMatchesBuiltIn) {
  const auto t = load_pattern_table(data_dir() + "/patterns.json");
  EXPECT_EQ(t, default_pattern_table());
  EXPECT_EQ(t.left_delimiters.size(), 10u);
  EXPECT_EQ(t.right_delimiters.size(), 16u);
  EXPECT_EQ(t.formatting.size(), 35u);
  EXPECT_EQ(t.stop_list.size(), 12u);
  EXPECT_EQ(pattern_table_from_json(to_json(t)), t);
  EXPECT_THROW(pattern_table_from_json(nlohmann::json::object()), ParseError);
}

TEST(PatternTable, EveryListedTokenClassified) {
  const auto& t = default_pattern_table();
  for (const auto& s : t.left_delimiters) EXPECT_EQ(classify_alone(s), (LabelSet{PL::LeftDelimiter})) << s;
  for (const auto& s : t.right_delimiters) EXPECT_EQ(classify_alone(s), (LabelSet{PL::RightDelimiter})) << s;
  for (const auto& s : t.formatting) EXPECT_EQ(classify_alone(s), (LabelSet{PL::Formatting})) << s;
}

TEST(PatternTable, NegativeListNeverMatches) {
  const auto neg = negative_tokens();
  ASSERT_EQ(neg.size(), 200u);
  for (const auto& s : neg) {
    const auto l = classify_alone(s);
    EXPECT_FALSE(l.contains(PL::LeftDelimiter) || l.contains(PL::RightDelimiter) || l.contains(PL::Formatting))
        << "'" << s << "'";
  }
}

class HandCases : public ::testing::TestWithParam<PatternCase> {};

TEST_P(HandCases, Classify) {
  const auto& c = GetParam();
  auto r = realise(c);
  EXPECT_EQ(classify_token(r.context, r.context.size() - 1, r.stats, r.decoder), c.expected);
}

INSTANTIATE_TEST_SUITE_P(Cases, HandCases, ::testing::ValuesIn(pattern_cases()),
                         [](const ::testing::TestParamInfo<PatternCase>& info) {
                           std::string n;
                           for (char ch : info.param.name) n += std::isalnum(static_cast<unsigned char>(ch)) ? ch : '_';
                           return n;
                         });

TEST(HandCases, AtLeastThirty) { EXPECT_GE(pattern_cases().size(), 30u); }

TEST(ClassifyToken, Regexes) {
  EXPECT_TRUE(matches_word_start(" the"));
  EXPECT_TRUE(matches_word_start(" A"));
  EXPECT_FALSE(matches_word_start(" "));
  EXPECT_FALSE(matches_word_start("the"));
  EXPECT_FALSE(matches_word_start("  the"));
  EXPECT_FALSE(matches_word_start(" th e"));
  EXPECT_TRUE(matches_letters_only("Zz"));
  EXPECT_FALSE(matches_letters_only(""));
  EXPECT_FALSE(matches_letters_only("caf\xC3\xA9"));
}

TEST(ClassifyToken, Errors) {
  TokenDecoder dec({"a", "b"});
  BigramStats stats;
  Sequence ctx{0, 1};
  EXPECT_THROW(classify_token(ctx, 0, stats, dec), InvalidArgument);
  EXPECT_THROW(classify_token(ctx, 2, stats, dec), InvalidArgument);
  Sequence bad{0, 5};
  EXPECT_THROW(classify_token(bad, 1, stats, dec), InvalidArgument);
}

TEST(ClassifyToken, DisjointnessOverToyVocabulary) {
  const auto dec = toy_decoder(300);
  Corpus c = markov_corpus("m", 300, 299, random_transitions(300, 299, 3, 0.5, 4), 200, 32, 5);
  auto stats = bigram_stats(c);
  for (const auto& s : c.sequences)
    for (std::size_t p = 1; p < s.size(); ++p) {
      const auto l = classify_token(s, p, stats, dec);
      int exclusive = 0;
      for (auto x : {PL::LeftDelimiter, PL::RightDelimiter, PL::Formatting, PL::WordStart, PL::WordPart})
        exclusive += l.contains(x);
      EXPECT_LE(exclusive, 1);
      EXPECT_FALSE(l.contains(PL::WordPart) && l.contains(PL::InductionPattern));
    }
}

TEST(ToyDecoder, Layout) {
  const auto dec = toy_decoder(200);
  EXPECT_EQ(dec.size(), 200u);
  EXPECT_EQ(dec.decode(199), "<|endoftext|>");
  std::set<std::string> uniq(dec.strings().begin(), dec.strings().end());
  EXPECT_EQ(uniq.size(), 200u);
  EXPECT_THROW(toy_decoder(5), InvalidArgument);
}

TEST(PatternFrequencies, AllDelimiters) {
  TokenDecoder dec({"(", "<|endoftext|>"});
  Corpus c{"parens", {{1, 0, 0, 0}, {1, 0, 0}}, 2, 1};
  auto f = pattern_frequencies(c, bigram_stats(c), dec, 5, 0);
  EXPECT_EQ(f[PL::LeftDelimiter], 1.0);
  EXPECT_EQ(f.sampled, 5u);
  EXPECT_THROW(pattern_frequencies(c, bigram_stats(c), dec, 6, 0), InvalidArgument);
  Corpus empty{"e", {}, 2, 1};
  EXPECT_THROW(pattern_frequencies(empty, bigram_stats(c), dec, 1, 0), InvalidArgument);
}

TEST(PatternFrequencies, PlantedInductionRate) {
  const std::size_t vocab = 700;
  const auto dec = toy_decoder(vocab);
  std::vector<TokenId> alphabet;
  for (TokenId t = 200; t < 600; ++t) alphabet.push_back(t);
  auto pc = planted_induction_corpus("ind", vocab, vocab - 1, alphabet, 400, 64, 0.1, 11);
  auto stats = bigram_stats(pc.corpus);
  auto f = pattern_frequencies(pc.corpus, stats, dec, 10000, 3);
  EXPECT_NEAR(f[PL::InductionPattern], 0.1, 0.02);
  for (double x : f.fraction) {
    EXPECT_GE(x, 0.0);
    EXPECT_LE(x, 1.0);
  }
  EXPECT_EQ(f.fraction, pattern_frequencies(pc.corpus, stats, dec, 10000, 3).fraction);
}

TEST(Classification, JsonlExport) {
  TokenDecoder dec({"(", "<|endoftext|>", " cat"});
  std::vector<Sequence> ctx{{1, 0, 2}};
  BigramStats stats;
  std::stringstream ss;
  write_classification_jsonl(ss, ctx, stats, dec);
  EXPECT_EQ(ss.str(),
            "{\"context\":0,\"labels\":[\"LeftDelimiter\"],\"position\":1,\"token\":0}\n"
            "{\"context\":0,\"labels\":[\"WordStart\"],\"position\":2,\"token\":2}\n");
}
