#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "suscept/corpus.hpp"
#include "test_util.hpp"

using namespace suscept;
using suscept::testing::reference_mix;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

// Sequences tagged by their index so the mixer's choices are visible.
Corpus tagged_corpus(const std::string& id, std::size_t n, TokenId tag) {
  Corpus c{id, {}, 50, 49};
  for (std::size_t i = 0; i < n; ++i)
    c.sequences.push_back({49, tag, static_cast<TokenId>(i % 40)});
  return c;
}

}  // namespace

TEST(LoadCorpus, EmptyFileIsAnError) {
  const auto p = temp_path("suscept_empty.jsonl");
  std::ofstream(p).close();
  EXPECT_THROW(load_corpus(p, 10), ParseError);
  std::filesystem::remove(p);
}

TEST(LoadCorpus, SingleSequence) {
  const auto p = temp_path("suscept_one.jsonl");
  std::ofstream(p) << "[9, 5, 7]\n";
  auto c = load_corpus(p, 10);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c.sequences[0], (Sequence{9, 5, 7}));
  std::filesystem::remove(p);
}

TEST(LoadCorpus, ObjectRecordsAndBlankLines) {
  const auto p = temp_path("suscept_obj.jsonl");
  std::ofstream(p) << "{\"tokens\": [9, 1]}\n\n[9, 2, 3]\n";
  auto c = load_corpus(p, 10);
  EXPECT_EQ(c.size(), 2u);
  std::filesystem::remove(p);
}

TEST(LoadCorpus, RejectsOutOfRangeAndMalformed) {
  const auto p = temp_path("suscept_bad.jsonl");
  std::ofstream(p) << "[9, 5, 12]\n";
  EXPECT_THROW(load_corpus(p, 10), ParseError);
  std::ofstream(p) << "[9, 5\n";
  EXPECT_THROW(load_corpus(p, 10), ParseError);
  std::ofstream(p) << "[1, 5]\n";  // no BOS
  EXPECT_THROW(load_corpus(p, 10), ParseError);
  std::filesystem::remove(p);
}

TEST(LoadCorpus, RoundTrip) {
  auto c = markov_corpus("m", 12, 11, random_transitions(12, 11, 2, 0.7, 3), 20, 9, 4);
  const auto p = temp_path("suscept_rt.jsonl");
  save_corpus(p, c);
  auto back = load_corpus(p, 12, 11, "m");
  EXPECT_EQ(back, c);
  std::filesystem::remove(p);
}

TEST(MixDatasets, ZeroDeltaIsBase) {
  auto base = tagged_corpus("b", 30, 1), probe = tagged_corpus("p", 20, 2);
  auto m = mix_unshuffled(base, probe, 0.0);
  ASSERT_EQ(m.size(), 20u);
  for (std::size_t j = 0; j < 20; ++j) EXPECT_EQ(m.sequences[j], base.sequences[j]);
}

TEST(MixDatasets, UnitDeltaIsProbe) {
  auto base = tagged_corpus("b", 30, 1), probe = tagged_corpus("p", 20, 2);
  auto m = mix_unshuffled(base, probe, 1.0);
  ASSERT_EQ(m.size(), 20u);
  for (std::size_t j = 0; j < 20; ++j) EXPECT_EQ(m.sequences[j], probe.sequences[j]);
}

TEST(MixDatasets, TenthInsertsAtNinth) {
  // floor((j+1) * 0.1) first reaches 1 at j = 9.
  auto sched = mixing_schedule(10, 0.1);
  for (std::size_t j = 1; j <= 10; ++j) EXPECT_EQ(sched[j - 1], j == 9) << "j=" << j;
}

TEST(MixDatasets, MatchesReferenceTranscription) {
  for (double dh : {0.0, 0.03, 0.1, 0.25, 0.5, 0.77, 1.0}) {
    for (std::size_t n : {1u, 7u, 100u, 1234u}) {
      auto base = tagged_corpus("b", n + 5, 1), probe = tagged_corpus("p", n, 2);
      auto m = mix_unshuffled(base, probe, dh);
      auto ref = reference_mix(base.size(), probe.size(), dh);
      ASSERT_EQ(m.size(), ref.size());
      std::size_t probes = 0;
      for (std::size_t k = 0; k < ref.size(); ++k) {
        const auto& [from_probe, j] = ref[k];
        const auto& src = from_probe ? probe : base;
        EXPECT_EQ(m.sequences[k], src.sequences[j - 1]);
        probes += from_probe;
      }
      // count stays within one of floor((n+1) dh)
      const double expect = std::floor((ref.size() + 1) * dh);
      EXPECT_LE(std::abs(static_cast<double>(probes) - expect), 1.0);
    }
  }
}

TEST(MixDatasets, IdenticalCorporaGiveUnmixedDataset) {
  auto base = markov_corpus("q", 12, 11, random_transitions(12, 11, 2, 0.5, 1), 200, 6, 2);
  auto copy = base;
  auto mixed = mix_datasets(base, copy, 0.1, 77);
  auto unmixed = mix_datasets(base, base, 0.0, 77);
  EXPECT_EQ(mixed.sequences, unmixed.sequences);
}

TEST(MixDatasets, DeterministicAndVocabChecked) {
  auto base = tagged_corpus("b", 50, 1), probe = tagged_corpus("p", 50, 2);
  EXPECT_EQ(mix_datasets(base, probe, 0.25, 3).sequences, mix_datasets(base, probe, 0.25, 3).sequences);
  EXPECT_NE(mix_datasets(base, probe, 0.25, 3).sequences, mix_datasets(base, probe, 0.25, 4).sequences);
  probe.vocab_size = 60;
  EXPECT_THROW(mix_datasets(base, probe, 0.1, 0), InvalidArgument);
  EXPECT_THROW(mixing_schedule(3, 1.5), InvalidArgument);
}

TEST(SampleBatch, Contracts) {
  auto c = tagged_corpus("c", 10, 3);
  EXPECT_THROW(sample_batch(c, 0, 1), InvalidArgument);
  EXPECT_EQ(sample_batch(c, 8, 5).contexts, sample_batch(c, 8, 5).contexts);
  Corpus one{"one", {{49, 3, 4}}, 50, 49};
  auto b = sample_batch(one, 3, 9);
  ASSERT_EQ(b.contexts.size(), 3u);
  for (const auto& s : b.contexts) EXPECT_EQ(s, one.sequences[0]);
  Corpus empty{"e", {}, 50, 49};
  EXPECT_THROW(sample_batch(empty, 1, 0), InvalidArgument);
}

TEST(ProbeContexts, SelectionRules) {
  auto c = tagged_corpus("c", 1000, 3);
  auto idx = probe_context_indices(c, 160, 0);
  EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 160u);
  EXPECT_EQ(idx, probe_context_indices(c, 160, 0));

  auto all = probe_context_indices(c, c.size(), 1);
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i], i);

  EXPECT_THROW(sample_probe_contexts(c, 1001, 0), InvalidArgument);
}

TEST(BigramStats, HandCounts) {
  Corpus c{"c", {{9, 1, 2, 1, 2}}, 10, 9};
  auto s = bigram_stats(c);
  EXPECT_DOUBLE_EQ(s.probability(1, 2), 1.0);  // 2 of 2
  EXPECT_EQ(s.count(1, 2), 2u);
  EXPECT_DOUBLE_EQ(s.probability(2, 1), 1.0);
  EXPECT_DOUBLE_EQ(s.probability(1, 1), 0.0);
  EXPECT_DOUBLE_EQ(s.probability(5, 1), 0.0);
  EXPECT_EQ(s.total_tokens(), 5u);
}

TEST(BigramStats, RowsNormalize) {
  auto c = markov_corpus("m", 20, 19, random_transitions(20, 19, 3, 0.6, 8), 100, 12, 1);
  auto s = bigram_stats(c);
  for (const auto& [u, n] : s.rows()) {
    double total = 0.0;
    for (TokenId v = 0; v < 20; ++v) total += s.probability(u, v);
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(BigramStats, CsvExport) {
  Corpus c{"c", {{9, 1, 2, 1}}, 10, 9};
  std::ostringstream os;
  bigram_stats(c).write_csv(os);
  EXPECT_EQ(os.str(), "u,v,count,probability\n1,2,1,1\n2,1,1,1\n9,1,1,1\n");
}

TEST(Synthetic, PlantedInductionRate) {
  std::vector<TokenId> alphabet;
  for (TokenId t = 0; t < 400; ++t) alphabet.push_back(t);
  auto pc = planted_induction_corpus("ind", 401, 400, alphabet, 400, 64, 0.1, 3);
  std::size_t planted = 0;
  for (const auto& p : pc.planted) planted += p.size();
  const double rate = static_cast<double>(planted) / static_cast<double>(pc.corpus.predicted_positions());
  EXPECT_NEAR(rate, 0.1, 0.02);
  pc.corpus.validate();
  for (std::size_t i = 0; i < pc.planted.size(); ++i) {
    const auto& s = pc.corpus.sequences[i];
    for (auto p : pc.planted[i]) {
      bool found = false;
      for (std::size_t j = 1; j + 2 < p; ++j) found |= (s[j] == s[p - 1] && s[j + 1] == s[p]);
      EXPECT_TRUE(found);
    }
  }
}
