#pragma once

// Token pattern classification over decoded token strings.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "corpus.hpp"
#include "error.hpp"
#include "model.hpp"
#include "random.hpp"

namespace suscept {

enum class PatternLabel : std::uint8_t {
  WordPart = 0,
  InductionPattern,
  Formatting,
  WordStart,
  LeftDelimiter,
  RightDelimiter,
};

inline constexpr std::size_t kPatternCount = 6;
inline constexpr std::array<PatternLabel, kPatternCount> kAllPatterns{
    PatternLabel::WordPart,   PatternLabel::InductionPattern, PatternLabel::Formatting,
    PatternLabel::WordStart,  PatternLabel::LeftDelimiter,    PatternLabel::RightDelimiter};

inline std::string_view to_string(PatternLabel l) {
  switch (l) {
    case PatternLabel::WordPart: return "WordPart";
    case PatternLabel::InductionPattern: return "InductionPattern";
    case PatternLabel::Formatting: return "Formatting";
    case PatternLabel::WordStart: return "WordStart";
    case PatternLabel::LeftDelimiter: return "LeftDelimiter";
    case PatternLabel::RightDelimiter: return "RightDelimiter";
  }
  return "?";
}

/// Small bit set over the six labels.
class LabelSet {
 public:
  LabelSet() = default;
  LabelSet(std::initializer_list<PatternLabel> ls) {
    for (auto l : ls) insert(l);
  }
  void insert(PatternLabel l) { bits_ |= bit(l); }
  bool contains(PatternLabel l) const { return (bits_ & bit(l)) != 0; }
  bool empty() const { return bits_ == 0; }
  std::size_t size() const { return static_cast<std::size_t>(__builtin_popcount(bits_)); }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (auto l : kAllPatterns)
      if (contains(l)) out.emplace_back(to_string(l));
    return out;
  }
  bool operator==(const LabelSet&) const = default;

 private:
  static std::uint8_t bit(PatternLabel l) { return static_cast<std::uint8_t>(1u << static_cast<unsigned>(l)); }
  std::uint8_t bits_ = 0;
};

/// Membership lists, bigram threshold and induction stop list.
struct PatternTable {
  std::vector<std::string> left_delimiters;
  std::vector<std::string> right_delimiters;
  std::vector<std::string> formatting;
  std::vector<std::string> stop_list;
  double bigram_threshold = 0.05;

  bool operator==(const PatternTable&) const = default;
};

inline const PatternTable& default_pattern_table() {
  static const PatternTable table{
      {"<", " <", "{", " {", "(", " (", "[", " [", "</", "{\""},
      {">", " >", "}", " }", ")", " )", "]", " ]", "),", "],", "\")", "):", ").", "))", ");", "%)"},
      {" ",
       "\xC2\xA0",
       "\n",
       "\n\n",
       "\t",
       "\f",
       "\r",
       "~",
       "\\\\",
       " \\\\",
       "/",
       "//",
       "-",
       " -",
       "\xE2\x80\x94",
       " \xE2\x80\x94",
       "--",
       "----",
       "--------",
       "----------------",
       "_",
       ".",
       ",",
       ":",
       ";",
       ":\",",
       "\",",
       "****",
       "********",
       "\xC2\xB6",
       "<|endoftext|>",
       "=\"",
       "://",
       "\":\"",
       "####"},
      {" ", "\n", ",", ".", "the", "to", ":", "and", "by", "in", "a", "be"},
      0.05};
  return table;
}

inline nlohmann::json to_json(const PatternTable& t) {
  return {{"left_delimiters", t.left_delimiters},
          {"right_delimiters", t.right_delimiters},
          {"formatting", t.formatting},
          {"induction_stop_list", t.stop_list},
          {"bigram_threshold", t.bigram_threshold}};
}

inline PatternTable pattern_table_from_json(const nlohmann::json& j) {
  try {
    PatternTable t;
    t.left_delimiters = j.at("left_delimiters").get<std::vector<std::string>>();
    t.right_delimiters = j.at("right_delimiters").get<std::vector<std::string>>();
    t.formatting = j.at("formatting").get<std::vector<std::string>>();
    t.stop_list = j.at("induction_stop_list").get<std::vector<std::string>>();
    t.bigram_threshold = j.at("bigram_threshold").get<double>();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("pattern table: ") + e.what());
  }
}

inline PatternTable load_pattern_table(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open pattern table " + path);
  try {
    return pattern_table_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

/// Decoded string for every token id.
class TokenDecoder {
 public:
  TokenDecoder() = default;
  explicit TokenDecoder(std::vector<std::string> strings) : strings_(std::move(strings)) {}

  std::size_t size() const { return strings_.size(); }
  const std::string& decode(TokenId t) const {
    detail::require(t < strings_.size(), "TokenDecoder: token " + std::to_string(t) + " outside the vocabulary");
    return strings_[t];
  }
  const std::vector<std::string>& strings() const { return strings_; }

  /// The decoder must cover the corpus vocabulary.
  void check_covers(std::size_t vocab_size) const {
    detail::require(strings_.size() >= vocab_size, "TokenDecoder: covers " + std::to_string(strings_.size()) +
                                                       " ids, vocabulary has " + std::to_string(vocab_size));
  }

 private:
  std::vector<std::string> strings_;
};

inline TokenDecoder load_decoder(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open vocabulary " + path);
  try {
    return TokenDecoder(nlohmann::json::parse(is).get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

namespace detail {

inline bool is_ascii_letter(char c) { return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z'); }

inline bool all_letters(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), is_ascii_letter);
}

inline bool member(const std::vector<std::string>& list, std::string_view s) {
  return std::find(list.begin(), list.end(), s) != list.end();
}

}  // namespace detail

/// " [A-Za-z]+$" as a full match.
inline bool matches_word_start(std::string_view s) { return s.size() >= 2 && s[0] == ' ' && detail::all_letters(s.substr(1)); }

/// "[A-Za-z]+$" as a full match.
inline bool matches_letters_only(std::string_view s) { return detail::all_letters(s); }

/// Labels of context[position]. Bigram rules use the pair
/// (context[position-1], context[position]) and q from `stats`.
inline LabelSet classify_token(std::span<const TokenId> context, std::size_t position, const BigramStats& stats,
                               const TokenDecoder& decoder, const PatternTable& table = default_pattern_table()) {
  detail::require(position >= 1, "classify_token: position must be >= 1");
  detail::require(position < context.size(), "classify_token: position past the end of the context");
  const TokenId v = context[position], u = context[position - 1];
  const std::string& s = decoder.decode(v);
  LabelSet out;
  const bool left = detail::member(table.left_delimiters, s);
  const bool right = detail::member(table.right_delimiters, s);
  const bool fmt = detail::member(table.formatting, s);
  if (left) out.insert(PatternLabel::LeftDelimiter);
  if (right) out.insert(PatternLabel::RightDelimiter);
  if (fmt) out.insert(PatternLabel::Formatting);
  if (matches_word_start(s)) out.insert(PatternLabel::WordStart);

  const double q = stats.probability(u, v);
  if (q > table.bigram_threshold && matches_letters_only(s) && !left && !right && !fmt)
    out.insert(PatternLabel::WordPart);

  if (q <= table.bigram_threshold && !detail::member(table.stop_list, decoder.decode(u)) &&
      !detail::member(table.stop_list, s)) {
    // x y U x y with U possibly empty: an earlier (x, y) starting at i <= position - 3.
    for (std::size_t i = 0; i + 3 <= position; ++i) {
      if (context[i] == u && context[i + 1] == v) {
        out.insert(PatternLabel::InductionPattern);
        break;
      }
    }
  }
  return out;
}

struct PatternFrequencies {
  std::array<double, kPatternCount> fraction{};
  std::size_t sampled = 0;

  double operator[](PatternLabel l) const { return fraction[static_cast<std::size_t>(l)]; }
};

/// Positions (sequence index, position >= 1) of every predicted token.
inline std::vector<std::pair<std::size_t, std::size_t>> predicted_positions(const Corpus& corpus) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t s = 0; s < corpus.sequences.size(); ++s)
    for (std::size_t p = 1; p < corpus.sequences[s].size(); ++p) out.emplace_back(s, p);
  return out;
}

/// Fraction of `sample_size` seeded-sampled predicted tokens carrying each
/// label. Labels overlap, so fractions need not sum to 1.
inline PatternFrequencies pattern_frequencies(const Corpus& corpus, const BigramStats& stats,
                                              const TokenDecoder& decoder, std::size_t sample_size,
                                              std::uint64_t seed,
                                              const PatternTable& table = default_pattern_table()) {
  detail::require(!corpus.empty(), "pattern_frequencies: corpus '" + corpus.id + "' is empty");
  auto positions = predicted_positions(corpus);
  detail::require(sample_size >= 1 && sample_size <= positions.size(),
                  "pattern_frequencies: sample_size " + std::to_string(sample_size) + " not in [1, " +
                      std::to_string(positions.size()) + "]");
  Rng rng = make_rng(seed, {0x9a77});
  // Partial Fisher-Yates: the first sample_size entries are a uniform sample.
  for (std::size_t i = 0; i < sample_size; ++i) std::swap(positions[i], positions[i + uniform_index(rng, positions.size() - i)]);
  PatternFrequencies f;
  f.sampled = sample_size;
  for (std::size_t i = 0; i < sample_size; ++i) {
    const auto [s, p] = positions[i];
    const auto labels = classify_token(corpus.sequences[s], p, stats, decoder, table);
    for (auto l : kAllPatterns)
      if (labels.contains(l)) f.fraction[static_cast<std::size_t>(l)] += 1.0;
  }
  for (auto& x : f.fraction) x /= static_cast<double>(sample_size);
  return f;
}

/// One JSON line per predicted position: context, position, token, labels.
inline void write_classification_jsonl(std::ostream& os, std::span<const Sequence> contexts, const BigramStats& stats,
                                       const TokenDecoder& decoder, const PatternTable& table = default_pattern_table()) {
  for (std::size_t c = 0; c < contexts.size(); ++c)
    for (std::size_t p = 1; p < contexts[c].size(); ++p) {
      nlohmann::json j{{"context", c},
                       {"position", p},
                       {"token", contexts[c][p]},
                       {"labels", classify_token(contexts[c], p, stats, decoder, table).names()}};
      os << j.dump() << '\n';
    }
}

// ---------------------------------------------------------------------------
// Toy vocabulary for synthetic corpora

/// Decoded strings for a synthetic vocabulary of `vocab_size` ids: every
/// table entry, the stop words, some word starts and word parts, then
/// generated letter strings; the last id decodes to "<|endoftext|>" so it can
/// serve as BOS.
inline TokenDecoder toy_decoder(std::size_t vocab_size) {
  const auto& t = default_pattern_table();
  std::vector<std::string> v;
  std::set<std::string> seen;
  auto push = [&](const std::string& s) {
    if (s != "<|endoftext|>" && seen.insert(s).second) v.push_back(s);
  };
  for (const auto* list : {&t.left_delimiters, &t.right_delimiters, &t.formatting, &t.stop_list})
    for (const auto& s : *list) push(s);
  for (const char* s : {" the", " of", " model", " head", " token", " data", " cat", " sat", " on", " mat", " value",
                        " time", " run", " code", " line", " word"})
    push(s);
  for (const char* s : {"ing", "ed", "tion", "er", "ly", "ment", "ness", "able", "ous", "ive", "al", "ist"}) push(s);
  for (std::size_t k = 0; v.size() + 1 < vocab_size; ++k) {
    std::string s;
    std::size_t n = k;
    do {
      s.push_back(static_cast<char>('a' + n % 26));
      n /= 26;
    } while (n);
    push((k % 2 ? " z" : "q") + s);
  }
  detail::require(vocab_size > v.size(), "toy_decoder: vocab_size must exceed " + std::to_string(v.size()));
  v.resize(vocab_size - 1);
  v.push_back("<|endoftext|>");
  return TokenDecoder(std::move(v));
}

}  // namespace suscept
