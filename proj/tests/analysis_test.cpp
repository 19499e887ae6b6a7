#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "suscept/analysis.hpp"

using namespace suscept;

namespace {

SusceptibilityEstimate est(const std::string& probe, const std::string& comp, double v) {
  SusceptibilityEstimate e;
  e.probe = probe;
  e.component = comp;
  e.value = v;
  return e;
}

ResponseMatrix from_values(const Eigen::MatrixXd& v) {
  ResponseMatrix m;
  m.values = v;
  for (Eigen::Index r = 0; r < v.rows(); ++r) m.rows.push_back({"d" + std::to_string(r), std::nullopt, std::nullopt});
  for (Eigen::Index c = 0; c < v.cols(); ++c) m.cols.push_back("c" + std::to_string(c));
  return m;
}

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = g(rng);
  return m;
}

PerTokenEstimate pt(const std::string& dataset, const std::string& comp, std::size_t n, double offset) {
  PerTokenEstimate e;
  e.dataset = dataset;
  e.component = comp;
  for (std::size_t i = 0; i < n; ++i) {
    e.keys.push_back({i / 5, 1 + i % 5, static_cast<TokenId>(i % 7)});
    e.values.push_back(offset + std::sin(static_cast<double>(i) * 1.3 + offset));
  }
  return e;
}

double relative_frobenius(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) { return (a - b).norm() / b.norm(); }

}  // namespace

TEST(ResponseMatrix, PlacesValuesByLabel) {
  std::vector<SusceptibilityEstimate> v{est("code", "0:1", 1), est("code", "0:0", 2), est("math", "0:0", 3),
                                        est("math", "0:1", 4), est("code", "1:0", 5), est("math", "1:0", 6)};
  auto m = build_response_matrix(v);
  ASSERT_EQ(m.values.rows(), 2);
  ASSERT_EQ(m.values.cols(), 3);
  EXPECT_EQ(m.cols, (std::vector<std::string>{"0:1", "0:0", "1:0"}));
  EXPECT_EQ(m.rows[1].dataset, "math");
  EXPECT_EQ(m.values(1, 0), 4);
  EXPECT_EQ(m.values(0, 2), 5);
}

TEST(ResponseMatrix, DuplicateAndMissingCells) {
  std::vector<SusceptibilityEstimate> dup{est("a", "h", 1), est("a", "h", 2)};
  EXPECT_THROW(build_response_matrix(dup), InvalidArgument);
  std::vector<SusceptibilityEstimate> miss{est("a", "h0", 1), est("a", "h1", 2), est("b", "h0", 3)};
  try {
    build_response_matrix(miss);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("(b, h1)"), std::string::npos);
  }
}

TEST(PerTokenMatrix, ShapesAndSelection) {
  std::vector<PerTokenEstimate> v;
  for (int h = 0; h < 16; ++h) {
    v.push_back(pt("code", "h" + std::to_string(h), 300, h));
    v.push_back(pt("math", "h" + std::to_string(h), 250, -h));
  }
  auto m = build_pertoken_matrix(v, 100, 1);
  EXPECT_EQ(m.values.rows(), 200);
  EXPECT_EQ(m.values.cols(), 16);
  EXPECT_EQ(m.rows[0].dataset, "code");
  EXPECT_EQ(m.rows[150].dataset, "math");
  auto again = build_pertoken_matrix(v, 100, 1);
  EXPECT_EQ(m.rows, again.rows);
  EXPECT_EQ(m.values, again.values);
  EXPECT_NE(m.rows, build_pertoken_matrix(v, 100, 2).rows);
  EXPECT_THROW(build_pertoken_matrix(v, 251, 1), InvalidArgument);
}

TEST(PerTokenMatrix, AllInstancesOnce) {
  std::vector<PerTokenEstimate> v{pt("a", "x", 40, 0), pt("a", "y", 40, 1)};
  auto m = build_pertoken_matrix(v, 40, 9);
  ASSERT_EQ(m.rows.size(), 40u);
  for (std::size_t i = 0; i < 40; ++i) {
    EXPECT_EQ(m.rows[i].token, v[0].keys[i]);
    EXPECT_EQ(m.values(static_cast<Eigen::Index>(i), 1), v[1].values[i]);
  }
  v[1].keys[3].position = 99;
  EXPECT_THROW(build_pertoken_matrix(v, 40, 9), InvalidArgument);
}

TEST(Standardize, PopulationConvention) {
  Eigen::MatrixXd x(2, 1);
  x << 1, 3;
  auto s = standardize_columns(from_values(x));
  EXPECT_DOUBLE_EQ(s.values(0, 0), -1.0);
  EXPECT_DOUBLE_EQ(s.values(1, 0), 1.0);
  EXPECT_DOUBLE_EQ(s.col_means[0], 2.0);
  EXPECT_DOUBLE_EQ(s.col_stds[0], 1.0);
}

TEST(Standardize, InvariantsIdempotenceAndConstantColumns) {
  Eigen::MatrixXd x = random_matrix(30, 4, 3);
  x.col(2).setConstant(7.5);
  auto s = standardize_columns(from_values(x));
  EXPECT_TRUE(s.standardized);
  EXPECT_TRUE(s.constant_cols[2]);
  EXPECT_FALSE(s.constant_cols[0]);
  EXPECT_EQ(s.values.col(2).cwiseAbs().maxCoeff(), 0.0);
  for (Eigen::Index c : {0, 1, 3}) {
    EXPECT_LT(std::abs(s.values.col(c).mean()), 1e-9);
    EXPECT_NEAR(std::sqrt(s.values.col(c).squaredNorm() / 30.0), 1.0, 1e-9);
  }
  auto twice = standardize_columns(s);
  EXPECT_LT((twice.values - s.values).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(standardize_columns(from_values(Eigen::MatrixXd::Ones(1, 3))), InvalidArgument);
}

TEST(Pca, RankOne) {
  Eigen::VectorXd a(5), b(3);
  a << 1, -2, 0.5, 3, 1;
  b << 2, 1, -1;
  auto r = pca(from_values(a * b.transpose()), 3);
  EXPECT_NEAR(r.explained_variance_ratio[0], 1.0, 1e-12);
  EXPECT_EQ(numerical_rank(a * b.transpose()), 1u);
}

TEST(Pca, IdentityTwoByTwo) {
  // Uncentred identity: equal singular values. After centring the columns
  // the matrix is [[.5,-.5],[-.5,.5]], which has rank one.
  auto r = pca(from_values(Eigen::MatrixXd::Identity(2, 2)), 2);
  EXPECT_NEAR(r.explained_variance_ratio[0], 0.5, 1e-15);
  EXPECT_NEAR(r.explained_variance_ratio[1], 0.5, 1e-15);
  auto c = pca(standardize_columns(from_values(Eigen::MatrixXd::Identity(2, 2))), 2);
  EXPECT_NEAR(c.explained_variance_ratio[0], 1.0, 1e-15);
  EXPECT_NEAR(c.explained_variance_ratio[1], 0.0, 1e-15);
}

TEST(Pca, FullRankProperties) {
  auto s = standardize_columns(from_values(random_matrix(40, 6, 5)));
  auto r = pca(s, 6);
  double total = 0.0;
  for (double x : r.explained_variance_ratio) {
    EXPECT_GE(x, 0.0);
    EXPECT_LE(x, 1.0);
    total += x;
  }
  EXPECT_NEAR(total, 1.0, 1e-10);
  for (std::size_t i = 1; i < r.k(); ++i) EXPECT_LE(r.singular_values[i], r.singular_values[i - 1]);
  EXPECT_LT((r.loadings * r.loadings.transpose() - Eigen::MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT(relative_frobenius(r.scores * r.loadings, s.values), 1e-10);
  EXPECT_LT((project(r, s.values) - r.scores).cwiseAbs().maxCoeff(), 1e-10);
  for (std::size_t i = 0; i < r.k(); ++i) {
    Eigen::Index arg;
    r.loadings.row(static_cast<Eigen::Index>(i)).cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(r.loadings(static_cast<Eigen::Index>(i), arg), 0.0);
  }
}

TEST(Pca, MatchesCovarianceEigenvalues) {
  auto s = standardize_columns(from_values(random_matrix(25, 5, 8)));
  auto r = pca(s, 5);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s.values.transpose() * s.values);
  const auto ev = es.eigenvalues();  // ascending
  for (Eigen::Index i = 0; i < 5; ++i) EXPECT_NEAR(r.singular_values[static_cast<std::size_t>(i)] * r.singular_values[static_cast<std::size_t>(i)], ev[4 - i], 1e-9);
}

TEST(Pca, RowPermutationInvariance) {
  Eigen::MatrixXd x = random_matrix(20, 4, 11);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(20);
  perm.setIdentity();
  Rng rng = make_rng(3);
  std::shuffle(perm.indices().data(), perm.indices().data() + 20, rng);
  auto a = pca(standardize_columns(from_values(x)), 4), b = pca(standardize_columns(from_values(perm * x)), 4);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a.explained_variance_ratio[i], b.explained_variance_ratio[i], 1e-12);
  EXPECT_LT((a.loadings.cwiseAbs() - b.loadings.cwiseAbs()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Pca, KOutOfRange) {
  auto s = from_values(random_matrix(3, 5, 1));
  EXPECT_THROW(pca(s, 0), InvalidArgument);
  EXPECT_THROW(pca(s, 4), InvalidArgument);
}

TEST(TrajectoryPca, SingleCheckpointReducesToPca) {
  auto m = from_values(random_matrix(6, 4, 2));
  std::vector<std::pair<std::string, ResponseMatrix>> in{{"100", m}};
  auto t = trajectory_pca(in, 3);
  auto p = pca(standardize_columns(m), 3);
  EXPECT_LT((t.pca.scores - p.scores).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((t.pca.loadings - p.loadings).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(t.pca.explained_variance_ratio, p.explained_variance_ratio);
}

TEST(TrajectoryPca, StackingAndProjections) {
  std::vector<std::pair<std::string, ResponseMatrix>> in;
  for (int t = 0; t < 3; ++t) in.emplace_back(std::to_string(t * 100), from_values(random_matrix(2, 4, 20 + t)));
  auto r = trajectory_pca(in, 2);
  ASSERT_EQ(r.stacked.values.rows(), 6);
  ASSERT_EQ(r.stacked.values.cols(), 4);
  EXPECT_EQ(r.stacked.rows[1].dataset, "d0");
  EXPECT_EQ(r.stacked.rows[1].checkpoint, "100");
  EXPECT_EQ(r.stacked.rows[3].dataset, "d1");
  // Row (d1, t=2) standardized from the raw input.
  const Eigen::Index c = 2;
  const double raw = in[2].second.values(1, c);
  EXPECT_NEAR(r.stacked.values(5, c), (raw - r.stacked.col_means[c]) / r.stacked.col_stds[c], 1e-12);
  ASSERT_EQ(r.projections.size(), 2u);
  for (Eigen::Index d = 0; d < 2; ++d)
    EXPECT_LT((r.projections[static_cast<std::size_t>(d)] - r.pca.scores.middleRows(d * 3, 3)).cwiseAbs().maxCoeff(),
              1e-10);
  auto again = trajectory_pca(in, 2);
  EXPECT_EQ(again.pca.scores, r.pca.scores);
}

TEST(TrajectoryPca, ColumnMismatch) {
  auto a = from_values(random_matrix(2, 3, 1));
  auto b = a;
  b.cols[1] = "other";
  std::vector<std::pair<std::string, ResponseMatrix>> in{{"0", a}, {"1", b}};
  EXPECT_THROW(trajectory_pca(in, 2), InvalidArgument);
}

namespace {

// Per-token matrix with rows from two datasets; PC1 score sign is planted.
struct ProfileFixture {
  ResponseMatrix m;
  PCAResult p;
  std::vector<LabelSet> labels;

  explicit ProfileFixture(std::size_t n) {
    Eigen::MatrixXd v(static_cast<Eigen::Index>(n), 1);
    for (std::size_t i = 0; i < n; ++i) {
      const bool induction = i % 4 == 0;
      v(static_cast<Eigen::Index>(i), 0) = induction ? 1.0 + 0.001 * i : -1.0 - 0.001 * i;
      labels.push_back(induction ? LabelSet{PatternLabel::InductionPattern} : LabelSet{PatternLabel::WordPart});
      m.rows.push_back({i < n / 2 ? "a" : "b", TokenKey{i, 1, 0}, std::nullopt});
    }
    m.cols = {"h"};
    m.values = v;
    p.singular_values = {1.0};
    p.explained_variance_ratio = {1.0};
    p.scores = v;
    p.loadings = Eigen::MatrixXd::Ones(1, 1);
    p.cols = m.cols;
  }
  RowClassifier classifier() const {
    return [this](const RowInfo& r) { return labels[r.token->context]; };
  }
};

}  // namespace

TEST(PatternProfile, PlantedInductionTokens) {
  ProfileFixture f(400);  // 100 planted induction rows with positive score
  auto prof = top_token_pattern_profile(0, f.m, f.p, f.classifier(), 0.25, 0);
  EXPECT_EQ(prof.bucket_size, 100u);
  EXPECT_EQ(prof.positive(PatternLabel::InductionPattern), 1.0);
  EXPECT_EQ(prof.negative(PatternLabel::WordPart), 1.0);
}

TEST(PatternProfile, FullQuantileIsPopulationFrequency) {
  ProfileFixture f(400);
  auto prof = top_token_pattern_profile(0, f.m, f.p, f.classifier(), 1.0);
  EXPECT_EQ(prof.positive(PatternLabel::InductionPattern), 0.25);
  EXPECT_EQ(prof.negative(PatternLabel::InductionPattern), 0.25);
  EXPECT_EQ(prof.positive(PatternLabel::WordPart), 0.75);
}

TEST(PatternProfile, MinimumBucketAndErrors) {
  ProfileFixture f(400);
  EXPECT_EQ(top_token_pattern_profile(0, f.m, f.p, f.classifier()).bucket_size, 50u);
  EXPECT_THROW(top_token_pattern_profile(0, f.m, f.p, f.classifier(), 0.001, 0), InvalidArgument);
  EXPECT_THROW(top_token_pattern_profile(1, f.m, f.p, f.classifier()), InvalidArgument);
}

TEST(PatternProfile, ContextClassifierOnDelimiters) {
  TokenDecoder dec({"(", "<|endoftext|>"});
  BigramStats stats;
  ContextClassifier cls(stats, dec);
  cls.add_dataset("p", {{1, 0, 0, 0}});
  ResponseMatrix m;
  m.cols = {"h"};
  m.values.resize(3, 1);
  m.values << 0.3, -0.2, 0.9;
  for (std::size_t pos = 1; pos <= 3; ++pos) m.rows.push_back({"p", TokenKey{0, pos, 0}, std::nullopt});
  PCAResult p;
  p.singular_values = {1.0};
  p.scores = m.values;
  auto prof = top_token_pattern_profile(0, m, p, cls, 0.5, 1);
  EXPECT_EQ(prof.positive(PatternLabel::LeftDelimiter), 1.0);
  EXPECT_EQ(prof.negative(PatternLabel::LeftDelimiter), 1.0);
  RowInfo bad{"q", TokenKey{0, 1, 0}, std::nullopt};
  EXPECT_THROW(cls(bad), InvalidArgument);
}

TEST(DatasetContributions, Decomposition) {
  ProfileFixture f(40);
  auto c = dataset_pc_contributions(0, f.m, f.p);
  ASSERT_EQ(c.size(), 2u);
  const double overall = f.p.scores.col(0).mean();
  EXPECT_NEAR((c[0].mean * c[0].count + c[1].mean * c[1].count) / 40.0, overall, 1e-12);

  ResponseMatrix one = f.m;
  for (auto& r : one.rows) r.dataset = "only";
  auto single = dataset_pc_contributions(0, one, f.p);
  ASSERT_EQ(single.size(), 1u);
  EXPECT_NEAR(single[0].mean, overall, 1e-12);
}

TEST(DatasetContributions, IdenticalRowsAndTooFewRows) {
  ResponseMatrix m;
  m.cols = {"h"};
  m.values.resize(4, 1);
  m.values << 1, 2, 1, 2;
  m.rows = {{"a"}, {"a"}, {"b"}, {"b"}};
  PCAResult p;
  p.singular_values = {1.0};
  p.scores = m.values;
  auto c = dataset_pc_contributions(0, m, p);
  EXPECT_EQ(c[0].mean, c[1].mean);
  m.rows[3].dataset = "c";
  EXPECT_THROW(dataset_pc_contributions(0, m, p), InvalidArgument);
}

TEST(Export, MatrixAndPcaCsv) {
  Eigen::MatrixXd x(2, 2);
  x << 1, 2, 3, 4;
  auto m = from_values(x);
  std::stringstream ss;
  write_matrix_csv(ss, m);
  EXPECT_EQ(ss.str(), "row,c0,c1\nd0,1,2\nd1,3,4\n");
  auto p = pca(m, 1);
  std::stringstream a, b, c;
  write_loadings_csv(a, p);
  write_scores_csv(b, p, m.rows);
  write_variance_csv(c, p);
  EXPECT_EQ(a.str().substr(0, 14), "component,PC1\n");
  EXPECT_EQ(b.str().substr(0, 43), "dataset,checkpoint,context,position,token,P");
  EXPECT_EQ(c.str().substr(0, 42), "pc,singular_value,explained_variance_ratio");
}
