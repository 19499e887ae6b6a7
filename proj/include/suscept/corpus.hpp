#pragma once

// Pre-tokenized corpora, the interleaving mixer, batch/probe sampling and
// bigram statistics. Corpus files are newline-delimited JSON: one record per
// line, either a bare array of token ids or an object {"tokens": [...]}.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "model.hpp"
#include "random.hpp"

namespace suscept {

struct Corpus {
  std::string id;
  std::vector<Sequence> sequences;
  std::size_t vocab_size = 0;
  TokenId bos = 0;

  std::size_t size() const { return sequences.size(); }
  bool empty() const { return sequences.empty(); }

  /// Throws on the first sequence that is too short, lacks BOS, or has an
  /// out-of-range token.
  void validate() const {
    detail::require(vocab_size >= 2, "corpus '" + id + "': vocab_size must be >= 2");
    detail::require(bos < vocab_size, "corpus '" + id + "': bos out of range");
    for (std::size_t i = 0; i < sequences.size(); ++i) {
      const auto& s = sequences[i];
      const std::string where = "corpus '" + id + "' sequence " + std::to_string(i);
      detail::require(s.size() >= 2, where + ": needs at least 2 tokens");
      detail::require(s.front() == bos, where + ": does not begin with BOS");
      for (auto t : s) detail::require(t < vocab_size, where + ": token " + std::to_string(t) + " out of range");
    }
  }

  /// Total number of predicted positions (sum of len-1).
  std::size_t predicted_positions() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.size() - 1;
    return n;
  }

  bool operator==(const Corpus&) const = default;
};

inline Corpus load_corpus(const std::string& path, std::size_t vocab_size,
                          std::optional<TokenId> bos = std::nullopt, std::string id = {}) {
  std::ifstream is(path);
  if (!is) throw ParseError("corpus: cannot open '" + path + "'");
  Corpus c;
  c.id = id.empty() ? path : std::move(id);
  c.vocab_size = vocab_size;
  c.bos = bos.value_or(static_cast<TokenId>(vocab_size - 1));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      const auto& arr = j.is_object() ? j.at("tokens") : j;
      if (!arr.is_array()) throw ParseError("record is not an array");
      Sequence s;
      s.reserve(arr.size());
      for (const auto& t : arr) {
        if (!t.is_number_integer() || t.get<std::int64_t>() < 0) throw ParseError("token is not a non-negative integer");
        s.push_back(t.get<TokenId>());
      }
      c.sequences.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw ParseError("corpus '" + path + "' line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (c.sequences.empty()) throw ParseError("corpus '" + path + "' is empty");
  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    throw ParseError(e.what());
  }
  return c;
}

inline void write_corpus(std::ostream& os, const Corpus& c) {
  for (const auto& s : c.sequences) os << nlohmann::json(s).dump() << '\n';
}

inline void save_corpus(const std::string& path, const Corpus& c) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("corpus: cannot open '" + path + "' for writing");
  write_corpus(os, c);
}

// ---------------------------------------------------------------------------
// Mixing

struct MixtureSpec {
  std::string base;
  std::string probe;
  double delta_h = 0.1;

  void validate() const {
    detail::require(delta_h >= 0.0 && delta_h <= 1.0, "mixture: delta_h must lie in [0, 1]");
  }
};

/// Source of each slot of the interleaved dataset: true = probe sample j,
/// false = base sample j. Walks j = 1..n inserting a probe sample whenever
/// the running probe count falls below floor((j+1) * delta_h).
inline std::vector<bool> mixing_schedule(std::size_t n, double delta_h) {
  detail::require(delta_h >= 0.0 && delta_h <= 1.0, "mixing: delta_h must lie in [0, 1]");
  std::vector<bool> from_probe(n, false);
  std::size_t probe_count = 0;
  for (std::size_t j = 1; j <= n; ++j) {
    const auto target = static_cast<std::size_t>(std::floor(static_cast<double>(j + 1) * delta_h));
    if (probe_count < target) {
      from_probe[j - 1] = true;
      ++probe_count;
    }
  }
  return from_probe;
}

/// Interleaved dataset of length min(N, M), before shuffling.
inline Corpus mix_unshuffled(const Corpus& base, const Corpus& probe, double delta_h) {
  detail::require(base.vocab_size == probe.vocab_size && base.bos == probe.bos,
                  "mix_datasets: corpora '" + base.id + "' and '" + probe.id + "' have different vocabularies");
  const std::size_t n = std::min(base.size(), probe.size());
  const auto schedule = mixing_schedule(n, delta_h);
  Corpus out;
  out.id = base.id + "+" + probe.id;
  out.vocab_size = base.vocab_size;
  out.bos = base.bos;
  out.sequences.reserve(n);
  for (std::size_t j = 0; j < n; ++j) out.sequences.push_back(schedule[j] ? probe.sequences[j] : base.sequences[j]);
  return out;
}

/// Interleave then shuffle with a seeded permutation.
inline Corpus mix_datasets(const Corpus& base, const Corpus& probe, double delta_h, std::uint64_t shuffle_seed) {
  Corpus out = mix_unshuffled(base, probe, delta_h);
  Rng rng = make_rng(shuffle_seed, {0x313});
  seeded_shuffle(out.sequences, rng);
  return out;
}

// ---------------------------------------------------------------------------
// Sampling

inline std::vector<std::size_t> sample_indices(Rng& rng, std::size_t population, std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = uniform_index(rng, population);
  return idx;
}

/// n contexts drawn uniformly with replacement.
inline SampleBatch sample_batch(const Corpus& corpus, std::size_t n, std::uint64_t seed) {
  detail::require(!corpus.empty(), "sample_batch: corpus '" + corpus.id + "' is empty");
  detail::require(n >= 1, "sample_batch: batch size must be >= 1");
  Rng rng = make_rng(seed, {0xba7c});
  SampleBatch b;
  for (auto i : sample_indices(rng, corpus.size(), n)) b.contexts.push_back(corpus.sequences[i]);
  return b;
}

/// Seeded shuffle of sequence indices, then the first `count`.
inline std::vector<std::size_t> probe_context_indices(const Corpus& corpus, std::size_t count, std::uint64_t seed) {
  detail::require(count <= corpus.size(), "sample_probe_contexts: corpus '" + corpus.id + "' has " +
                                              std::to_string(corpus.size()) + " sequences, " +
                                              std::to_string(count) + " requested");
  std::vector<std::size_t> idx(corpus.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng = make_rng(seed, {0x9b0e});
  seeded_shuffle(idx, rng);
  idx.resize(count);
  return idx;
}

inline std::vector<Sequence> sample_probe_contexts(const Corpus& corpus, std::size_t count = 160,
                                                   std::uint64_t seed = 0) {
  std::vector<Sequence> out;
  for (auto i : probe_context_indices(corpus, count, seed)) out.push_back(corpus.sequences[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Bigram statistics

/// Counts of adjacent pairs (u, v) and conditional frequencies q(v|u).
class BigramStats {
 public:
  void add(TokenId u, TokenId v, std::uint64_t n = 1) {
    pairs_[{u, v}] += n;
    rows_[u] += n;
    total_ += n;
  }

  void add_sequence(std::span<const TokenId> s) {
    for (std::size_t i = 0; i + 1 < s.size(); ++i) add(s[i], s[i + 1]);
    tokens_ += s.size();
  }

  std::uint64_t count(TokenId u, TokenId v) const {
    auto it = pairs_.find({u, v});
    return it == pairs_.end() ? 0 : it->second;
  }
  std::uint64_t row_count(TokenId u) const {
    auto it = rows_.find(u);
    return it == rows_.end() ? 0 : it->second;
  }

  /// q(v|u); zero when u was never followed by anything.
  double probability(TokenId u, TokenId v) const {
    const auto r = row_count(u);
    return r == 0 ? 0.0 : static_cast<double>(count(u, v)) / static_cast<double>(r);
  }

  std::uint64_t total_pairs() const { return total_; }
  std::uint64_t total_tokens() const { return tokens_; }
  const std::map<std::pair<TokenId, TokenId>, std::uint64_t>& pairs() const { return pairs_; }
  const std::map<TokenId, std::uint64_t>& rows() const { return rows_; }

  /// CSV with header u,v,count,probability sorted by (u, v).
  void write_csv(std::ostream& os) const {
    os << "u,v,count,probability\n";
    char buf[64];
    for (const auto& [key, n] : pairs_) {
      std::snprintf(buf, sizeof buf, "%.17g", probability(key.first, key.second));
      os << key.first << ',' << key.second << ',' << n << ',' << buf << '\n';
    }
  }

 private:
  std::map<std::pair<TokenId, TokenId>, std::uint64_t> pairs_;
  std::map<TokenId, std::uint64_t> rows_;
  std::uint64_t total_ = 0;
  std::uint64_t tokens_ = 0;
};

inline BigramStats bigram_stats(const Corpus& corpus) {
  detail::require(!corpus.empty(), "bigram_stats: corpus '" + corpus.id + "' is empty");
  BigramStats s;
  for (const auto& seq : corpus.sequences) s.add_sequence(seq);
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic corpora

namespace detail {

inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline std::size_t sample_discrete(Rng& rng, std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = uniform01(rng) * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  for (std::size_t i = weights.size(); i-- > 0;)
    if (weights[i] > 0) return i;
  throw InvalidArgument("sample_discrete: all weights are zero");
}

}  // namespace detail

/// Row-stochastic transition table over the full vocabulary. Row `bos` is the
/// distribution of the first token after BOS. Column `bos` is ignored.
using TransitionTable = std::vector<std::vector<double>>;

/// Each non-BOS token gets `branching` preferred successors sharing mass
/// `concentration`; the remainder is spread uniformly over all non-BOS tokens.
inline TransitionTable random_transitions(std::size_t vocab_size, TokenId bos, std::size_t branching,
                                          double concentration, std::uint64_t seed) {
  detail::require(concentration >= 0.0 && concentration <= 1.0, "random_transitions: concentration in [0,1]");
  const std::size_t n_tokens = vocab_size - 1;
  detail::require(branching >= 1 && branching <= n_tokens, "random_transitions: bad branching");
  Rng rng = make_rng(seed, {0x7a});
  TransitionTable t(vocab_size, std::vector<double>(vocab_size, 0.0));
  for (std::size_t u = 0; u < vocab_size; ++u) {
    for (std::size_t v = 0; v < vocab_size; ++v)
      if (v != bos) t[u][v] = (1.0 - concentration) / static_cast<double>(n_tokens);
    for (std::size_t k = 0; k < branching; ++k) {
      std::size_t v;
      do {
        v = uniform_index(rng, vocab_size);
      } while (v == bos);
      t[u][v] += concentration / static_cast<double>(branching);
    }
  }
  return t;
}

/// Sequences of exactly `length` tokens from a first-order Markov chain.
inline Corpus markov_corpus(std::string id, std::size_t vocab_size, TokenId bos, const TransitionTable& table,
                            std::size_t n_sequences, std::size_t length, std::uint64_t seed) {
  detail::require(table.size() == vocab_size, "markov_corpus: table must have vocab_size rows");
  detail::require(length >= 2, "markov_corpus: length must be >= 2");
  Rng rng = make_rng(seed, {0x3a4c});
  Corpus c{std::move(id), {}, vocab_size, bos};
  for (std::size_t i = 0; i < n_sequences; ++i) {
    Sequence s{bos};
    while (s.size() < length) {
      std::vector<double> row = table[s.back()];
      row[bos] = 0.0;
      s.push_back(static_cast<TokenId>(detail::sample_discrete(rng, row)));
    }
    c.sequences.push_back(std::move(s));
  }
  return c;
}

struct PlantedCorpus {
  Corpus corpus;
  /// For each sequence, positions whose token completes a planted x y ... x y.
  std::vector<std::vector<std::size_t>> planted;
};

/// Uniform filler from `alphabet` with planted repeats of earlier bigrams.
/// At each step a copy of an earlier bigram (x, y) is appended with probability
/// rate / (1 - rate), so about `rate` of predicted positions end a plant.
inline PlantedCorpus planted_induction_corpus(std::string id, std::size_t vocab_size, TokenId bos,
                                              std::span<const TokenId> alphabet, std::size_t n_sequences,
                                              std::size_t length, double rate, std::uint64_t seed) {
  detail::require(!alphabet.empty(), "planted_induction_corpus: empty alphabet");
  detail::require(rate >= 0.0 && rate < 1.0, "planted_induction_corpus: rate must lie in [0, 1)");
  detail::require(length >= 2, "planted_induction_corpus: length must be >= 2");
  const double step_prob = rate / (1.0 - rate);
  Rng rng = make_rng(seed, {0x1d});
  PlantedCorpus out{Corpus{std::move(id), {}, vocab_size, bos}, {}};
  for (std::size_t n = 0; n < n_sequences; ++n) {
    Sequence s{bos};
    std::vector<std::size_t> marks;
    while (s.size() < length) {
      const bool room = s.size() >= 3 && s.size() + 2 <= length;
      if (room && detail::uniform01(rng) < step_prob) {
        const std::size_t i = 1 + uniform_index(rng, s.size() - 2);  // i+1 <= size-1
        const TokenId x = s[i], y = s[i + 1];
        s.push_back(x);
        s.push_back(y);
        marks.push_back(s.size() - 1);
      } else {
        s.push_back(alphabet[uniform_index(rng, alphabet.size())]);
      }
    }
    out.corpus.sequences.push_back(std::move(s));
    out.planted.push_back(std::move(marks));
  }
  return out;
}

}  // namespace suscept
