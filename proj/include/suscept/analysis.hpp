#pragma once

// Response matrices and their principal components.
//
// Columns are standardized with the population (n) standard deviation, so a
// column (1, 3) becomes (-1, 1). Each loading vector is signed so that its
// largest-magnitude entry is positive.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "error.hpp"
#include "estimators.hpp"
#include "io.hpp"
#include "patterns.hpp"
#include "random.hpp"

namespace suscept {

/// Provenance of one matrix row.
struct RowInfo {
  std::string dataset;
  std::optional<TokenKey> token;
  std::optional<std::string> checkpoint;

  std::string label() const {
    std::string s = dataset;
    if (checkpoint) s += "@" + *checkpoint;
    if (token) s += "#" + std::to_string(token->context) + ":" + std::to_string(token->position);
    return s;
  }
  bool operator==(const RowInfo&) const = default;
};

struct ResponseMatrix {
  std::vector<RowInfo> rows;
  std::vector<std::string> cols;
  Eigen::MatrixXd values;
  bool standardized = false;
  std::vector<double> col_means;
  std::vector<double> col_stds;
  std::vector<bool> constant_cols;

  void validate() const {
    detail::require(values.rows() == static_cast<Eigen::Index>(rows.size()) &&
                        values.cols() == static_cast<Eigen::Index>(cols.size()),
                    "ResponseMatrix: labels do not match the value shape");
    detail::require(values.allFinite(), "ResponseMatrix: non-finite entry");
  }
};

/// One row per probe dataset, one column per component, each in order of
/// first appearance.
inline ResponseMatrix build_response_matrix(std::span<const SusceptibilityEstimate> estimates) {
  detail::require(!estimates.empty(), "build_response_matrix: no estimates");
  std::vector<std::string> datasets, comps;
  auto index_of = [](std::vector<std::string>& v, const std::string& s) {
    auto it = std::find(v.begin(), v.end(), s);
    if (it == v.end()) {
      v.push_back(s);
      return v.size() - 1;
    }
    return static_cast<std::size_t>(it - v.begin());
  };
  std::map<std::pair<std::size_t, std::size_t>, double> cells;
  for (const auto& e : estimates) {
    const auto r = index_of(datasets, e.probe), c = index_of(comps, e.component);
    detail::require(cells.emplace(std::pair{r, c}, e.value).second,
                    "build_response_matrix: duplicate cell (" + e.probe + ", " + e.component + ")");
  }
  ResponseMatrix m;
  m.cols = comps;
  m.values.resize(static_cast<Eigen::Index>(datasets.size()), static_cast<Eigen::Index>(comps.size()));
  for (std::size_t r = 0; r < datasets.size(); ++r) {
    m.rows.push_back({datasets[r], std::nullopt, std::nullopt});
    for (std::size_t c = 0; c < comps.size(); ++c) {
      auto it = cells.find({r, c});
      detail::require(it != cells.end(),
                      "build_response_matrix: missing cell (" + datasets[r] + ", " + comps[c] + ")");
      m.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = it->second;
    }
  }
  m.validate();
  return m;
}

/// Rows are `sample_size` seeded-sampled token instances per dataset (kept in
/// instance order); columns are components. All estimates of a dataset must
/// share the same token keys.
inline ResponseMatrix build_pertoken_matrix(std::span<const PerTokenEstimate> estimates, std::size_t sample_size,
                                            std::uint64_t seed) {
  detail::require(!estimates.empty(), "build_pertoken_matrix: no estimates");
  std::vector<std::string> datasets, comps;
  std::map<std::string, std::map<std::string, const PerTokenEstimate*>> grid;
  for (const auto& e : estimates) {
    if (std::find(datasets.begin(), datasets.end(), e.dataset) == datasets.end()) datasets.push_back(e.dataset);
    if (std::find(comps.begin(), comps.end(), e.component) == comps.end()) comps.push_back(e.component);
    detail::require(grid[e.dataset].emplace(e.component, &e).second,
                    "build_pertoken_matrix: duplicate cell (" + e.dataset + ", " + e.component + ")");
    detail::require(e.keys.size() == e.values.size(), "build_pertoken_matrix: estimate without token keys");
  }
  ResponseMatrix m;
  m.cols = comps;
  std::vector<std::vector<double>> rows;
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    const auto& byc = grid[datasets[d]];
    const PerTokenEstimate* first = nullptr;
    for (const auto& c : comps) {
      auto it = byc.find(c);
      detail::require(it != byc.end(), "build_pertoken_matrix: missing cell (" + datasets[d] + ", " + c + ")");
      if (!first) first = it->second;
      detail::require(it->second->keys == first->keys,
                      "build_pertoken_matrix: components of '" + datasets[d] + "' use different probe contexts");
    }
    const std::size_t n = first->keys.size();
    detail::require(sample_size >= 1 && sample_size <= n, "build_pertoken_matrix: sample of " +
                                                             std::to_string(sample_size) + " exceeds the " +
                                                             std::to_string(n) + " instances of '" + datasets[d] + "'");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng = make_rng(seed, {0x7e57, d});
    for (std::size_t i = 0; i < sample_size; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
    idx.resize(sample_size);
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) {
      m.rows.push_back({datasets[d], first->keys[i], std::nullopt});
      std::vector<double> row;
      for (const auto& c : comps) row.push_back(byc.at(c)->values[i]);
      rows.push_back(std::move(row));
    }
  }
  m.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(comps.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < comps.size(); ++c)
      m.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  m.validate();
  return m;
}

/// Centre every column and divide by its population standard deviation.
/// Constant columns are centred only and flagged.
inline ResponseMatrix standardize_columns(const ResponseMatrix& x) {
  x.validate();
  detail::require(x.values.rows() >= 2, "standardize_columns: need at least 2 rows");
  ResponseMatrix out = x;
  const auto n = static_cast<double>(x.values.rows());
  out.col_means.assign(x.cols.size(), 0.0);
  out.col_stds.assign(x.cols.size(), 0.0);
  out.constant_cols.assign(x.cols.size(), false);
  for (Eigen::Index c = 0; c < x.values.cols(); ++c) {
    auto col = out.values.col(c);
    const double mean = col.sum() / n;
    col.array() -= mean;
    const double sd = std::sqrt(col.squaredNorm() / n);
    const double scale = std::max(1.0, std::abs(mean));
    const auto ci = static_cast<std::size_t>(c);
    out.col_means[ci] = mean;
    out.col_stds[ci] = sd;
    if (sd <= 1e-14 * scale) {
      col.setZero();
      out.constant_cols[ci] = true;
    } else {
      col /= sd;
    }
  }
  out.standardized = true;
  return out;
}

struct PCAResult {
  std::vector<double> singular_values;           // k, descending
  Eigen::MatrixXd scores;                        // rows x k, U * S
  Eigen::MatrixXd loadings;                      // k x cols, rows of V'
  std::vector<double> explained_variance_ratio;  // k, sigma_i^2 / sum of all sigma^2
  std::vector<std::string> cols;

  std::size_t k() const { return singular_values.size(); }
};

/// Numerical rank: singular values above max(rows, cols) * eps * sigma_max.
inline std::size_t numerical_rank(const Eigen::MatrixXd& x) {
  if (x.size() == 0) return 0;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(x);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s[0] == 0.0) return 0;
  const double tol = static_cast<double>(std::max(x.rows(), x.cols())) * 2.220446049250313e-16 * s[0];
  return static_cast<std::size_t>((s.array() > tol).count());
}

inline PCAResult pca(const ResponseMatrix& x, std::size_t k) {
  x.validate();
  const auto full = static_cast<std::size_t>(std::min(x.values.rows(), x.values.cols()));
  detail::require(k >= 1 && k <= full,
                  "pca: k = " + std::to_string(k) + " outside [1, " + std::to_string(full) + "]");
  Eigen::BDCSVD<Eigen::MatrixXd> svd(x.values, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  const double total = s.squaredNorm();
  detail::require(total > 0.0, "pca: matrix is identically zero");
  PCAResult r;
  r.cols = x.cols;
  const auto ki = static_cast<Eigen::Index>(k);
  Eigen::MatrixXd U = svd.matrixU().leftCols(ki);
  Eigen::MatrixXd V = svd.matrixV().leftCols(ki);
  for (Eigen::Index i = 0; i < ki; ++i) {
    Eigen::Index arg = 0;
    V.col(i).cwiseAbs().maxCoeff(&arg);
    if (V(arg, i) < 0.0) {
      V.col(i) *= -1.0;
      U.col(i) *= -1.0;
    }
    r.singular_values.push_back(s[i]);
    r.explained_variance_ratio.push_back(s[i] * s[i] / total);
  }
  r.scores = U * s.head(ki).asDiagonal();
  r.loadings = V.transpose();
  return r;
}

/// Projection of already-standardized rows onto the first k loadings.
inline Eigen::MatrixXd project(const PCAResult& p, const Eigen::MatrixXd& standardized_rows) {
  detail::require(standardized_rows.cols() == p.loadings.cols(), "project: column count mismatch");
  return standardized_rows * p.loadings.transpose();
}

// ---------------------------------------------------------------------------
// Trajectory PCA

struct TrajectoryResult {
  PCAResult pca;
  ResponseMatrix stacked;  // standardized, rows ordered dataset-major then checkpoint
  std::vector<std::string> datasets;
  std::vector<std::string> checkpoints;
  /// projections[d] is checkpoints x k.
  std::vector<Eigen::MatrixXd> projections;
};

/// `per_checkpoint` holds (checkpoint id, dataset x component matrix) in
/// checkpoint order. Projections are of the standardized rows:
/// ((gamma_d(t) - mu) / sigma) V_k, which reproduce the score rows.
inline TrajectoryResult trajectory_pca(std::span<const std::pair<std::string, ResponseMatrix>> per_checkpoint,
                                       std::size_t k) {
  detail::require(!per_checkpoint.empty(), "trajectory_pca: no checkpoints");
  const auto& first = per_checkpoint.front().second;
  first.validate();
  TrajectoryResult r;
  for (const auto& row : first.rows) r.datasets.push_back(row.dataset);
  for (const auto& [id, m] : per_checkpoint) {
    m.validate();
    detail::require(m.cols == first.cols, "trajectory_pca: checkpoint '" + id + "' has different component columns");
    std::vector<std::string> ds;
    for (const auto& row : m.rows) ds.push_back(row.dataset);
    detail::require(ds == r.datasets, "trajectory_pca: checkpoint '" + id + "' has different dataset rows");
    r.checkpoints.push_back(id);
  }
  const auto T = static_cast<Eigen::Index>(per_checkpoint.size());
  const auto D = static_cast<Eigen::Index>(r.datasets.size());
  ResponseMatrix stacked;
  stacked.cols = first.cols;
  stacked.values.resize(D * T, first.values.cols());
  for (Eigen::Index d = 0; d < D; ++d)
    for (Eigen::Index t = 0; t < T; ++t) {
      stacked.values.row(d * T + t) = per_checkpoint[static_cast<std::size_t>(t)].second.values.row(d);
      stacked.rows.push_back({r.datasets[static_cast<std::size_t>(d)], std::nullopt,
                              r.checkpoints[static_cast<std::size_t>(t)]});
    }
  r.stacked = standardize_columns(stacked);
  r.pca = pca(r.stacked, k);
  const Eigen::MatrixXd proj = project(r.pca, r.stacked.values);
  for (Eigen::Index d = 0; d < D; ++d) r.projections.push_back(proj.middleRows(d * T, T));
  return r;
}

// ---------------------------------------------------------------------------
// Summaries over per-token PCA

using RowClassifier = std::function<LabelSet(const RowInfo&)>;

/// Classifies rows against the probe contexts they came from.
class ContextClassifier {
 public:
  ContextClassifier(const BigramStats& stats, const TokenDecoder& decoder,
                    const PatternTable& table = default_pattern_table())
      : stats_(&stats), decoder_(&decoder), table_(table) {}

  void add_dataset(const std::string& dataset, std::vector<Sequence> contexts) {
    contexts_[dataset] = std::move(contexts);
  }

  LabelSet operator()(const RowInfo& row) const {
    detail::require(row.token.has_value(), "classifier: row '" + row.label() + "' has no token provenance");
    auto it = contexts_.find(row.dataset);
    detail::require(it != contexts_.end(), "classifier: no contexts for dataset '" + row.dataset + "'");
    detail::require(row.token->context < it->second.size(), "classifier: context index out of range");
    return classify_token(it->second[row.token->context], row.token->position, *stats_, *decoder_, table_);
  }

 private:
  const BigramStats* stats_;
  const TokenDecoder* decoder_;
  PatternTable table_;
  std::map<std::string, std::vector<Sequence>> contexts_;
};

struct PatternProfile {
  std::array<double, kPatternCount> top_positive{};
  std::array<double, kPatternCount> top_negative{};
  std::size_t bucket_size = 0;

  double positive(PatternLabel l) const { return top_positive[static_cast<std::size_t>(l)]; }
  double negative(PatternLabel l) const { return top_negative[static_cast<std::size_t>(l)]; }
};

/// Buckets of size max(floor(quantile * n), min(min_tokens, n)): the rows with
/// the highest and the lowest scores on the chosen PC. Ties keep row order.
inline PatternProfile top_token_pattern_profile(std::size_t pc_index, const ResponseMatrix& pertoken,
                                                const PCAResult& p, const RowClassifier& classify,
                                                double quantile = 0.01, std::size_t min_tokens = 50) {
  detail::require(pc_index < p.k(), "top_token_pattern_profile: pc_index out of range");
  const auto n = static_cast<std::size_t>(p.scores.rows());
  detail::require(n == pertoken.rows.size(), "top_token_pattern_profile: matrix and PCA row counts differ");
  detail::require(quantile > 0.0 && quantile <= 1.0, "top_token_pattern_profile: quantile must lie in (0, 1]");
  const std::size_t k =
      std::max(static_cast<std::size_t>(std::floor(quantile * static_cast<double>(n))), std::min(min_tokens, n));
  detail::require(k >= 1, "top_token_pattern_profile: quantile selects zero tokens");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  const auto col = p.scores.col(static_cast<Eigen::Index>(pc_index));
  auto bucket = [&](bool descending) {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return descending ? col[static_cast<Eigen::Index>(a)] > col[static_cast<Eigen::Index>(b)]
                        : col[static_cast<Eigen::Index>(a)] < col[static_cast<Eigen::Index>(b)];
    });
    std::array<double, kPatternCount> f{};
    for (std::size_t i = 0; i < k; ++i) {
      const auto labels = classify(pertoken.rows[order[i]]);
      for (auto l : kAllPatterns)
        if (labels.contains(l)) f[static_cast<std::size_t>(l)] += 1.0;
    }
    for (auto& x : f) x /= static_cast<double>(k);
    return f;
  };
  PatternProfile out;
  out.bucket_size = k;
  out.top_positive = bucket(true);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  out.top_negative = bucket(false);
  return out;
}

struct DatasetContribution {
  std::string dataset;
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t count = 0;
};

/// Mean PC score over each dataset's rows with its standard error
/// (sample std / sqrt(count)).
inline std::vector<DatasetContribution> dataset_pc_contributions(std::size_t pc_index, const ResponseMatrix& pertoken,
                                                                 const PCAResult& p) {
  detail::require(pc_index < p.k(), "dataset_pc_contributions: pc_index out of range");
  detail::require(static_cast<std::size_t>(p.scores.rows()) == pertoken.rows.size(),
                  "dataset_pc_contributions: matrix and PCA row counts differ");
  std::vector<DatasetContribution> out;
  std::map<std::string, std::vector<double>> by;
  for (std::size_t i = 0; i < pertoken.rows.size(); ++i) {
    const auto& ds = pertoken.rows[i].dataset;
    if (!by.count(ds)) out.push_back({ds, 0.0, 0.0, 0});
    by[ds].push_back(p.scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(pc_index)));
  }
  for (auto& c : out) {
    const auto& v = by[c.dataset];
    detail::require(v.size() >= 2, "dataset_pc_contributions: dataset '" + c.dataset + "' has fewer than 2 rows");
    c.count = v.size();
    for (double x : v) c.mean += x;
    c.mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - c.mean) * (x - c.mean);
    c.std_error = std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV export

inline void write_matrix_csv(std::ostream& os, const ResponseMatrix& m) {
  os << "row";
  for (const auto& c : m.cols) os << ',' << csv_field(c);
  os << '\n';
  for (std::size_t r = 0; r < m.rows.size(); ++r) {
    os << csv_field(m.rows[r].label());
    for (Eigen::Index c = 0; c < m.values.cols(); ++c)
      os << ',' << format_double(m.values(static_cast<Eigen::Index>(r), c));
    os << '\n';
  }
}

inline void write_loadings_csv(std::ostream& os, const PCAResult& p) {
  os << "component";
  for (std::size_t i = 0; i < p.k(); ++i) os << ",PC" << i + 1;
  os << '\n';
  for (std::size_t c = 0; c < p.cols.size(); ++c) {
    os << csv_field(p.cols[c]);
    for (std::size_t i = 0; i < p.k(); ++i)
      os << ',' << format_double(p.loadings(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)));
    os << '\n';
  }
}

inline void write_scores_csv(std::ostream& os, const PCAResult& p, std::span<const RowInfo> rows) {
  detail::require(rows.size() == static_cast<std::size_t>(p.scores.rows()), "write_scores_csv: row count mismatch");
  os << "dataset,checkpoint,context,position,token";
  for (std::size_t i = 0; i < p.k(); ++i) os << ",PC" << i + 1;
  os << '\n';
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& ri = rows[r];
    os << csv_field(ri.dataset) << ',' << csv_field(ri.checkpoint.value_or(""));
    if (ri.token)
      os << ',' << ri.token->context << ',' << ri.token->position << ',' << ri.token->token;
    else
      os << ",,,";
    for (std::size_t i = 0; i < p.k(); ++i)
      os << ',' << format_double(p.scores(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)));
    os << '\n';
  }
}

inline void write_variance_csv(std::ostream& os, const PCAResult& p) {
  os << "pc,singular_value,explained_variance_ratio\n";
  for (std::size_t i = 0; i < p.k(); ++i)
    os << "PC" << i + 1 << ',' << format_double(p.singular_values[i]) << ','
       << format_double(p.explained_variance_ratio[i]) << '\n';
}

}  // namespace suscept
