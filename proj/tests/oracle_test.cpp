#include <gtest/gtest.h>

#include <cmath>

#include "suscept/oracle.hpp"

using namespace suscept;

namespace {

QuadraticPotential scalar(double a, double bb, double lin, double gamma = 300.0, double n_beta = 30.0) {
  QuadraticPotential p;
  p.A = Eigen::MatrixXd::Constant(1, 1, a);
  p.B = Eigen::MatrixXd::Constant(1, 1, bb);
  p.b = Eigen::VectorXd::Constant(1, lin);
  p.w_star = Eigen::VectorXd::Constant(1, 0.3);
  p.gamma = gamma;
  p.n_beta = n_beta;
  return p;
}

// Cov(1/2 x'Ax, 1/2 x'Bx) for x ~ N(0, S) by Isserlis, summed index by index.
double isserlis_covariance(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, const Eigen::MatrixXd& S) {
  const auto d = A.rows();
  double c = 0.0;
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j)
      for (Eigen::Index k = 0; k < d; ++k)
        for (Eigen::Index l = 0; l < d; ++l)
          c += 0.25 * A(i, j) * B(k, l) * (S(i, k) * S(j, l) + S(i, l) * S(j, k));
  return c;
}

// E[L_h] under the 1-d shifted posterior by trapezoidal quadrature.
double quadrature_shifted_loss(const QuadraticPotential& p, double dh) {
  const double a = p.A(0, 0), bb = p.B(0, 0), lin = p.b[0];
  auto lh = [&](double x) { return 0.5 * a * x * x + dh * (0.5 * bb * x * x + lin * x); };
  const double lo = -1.0, hi = 1.0;
  const int n = 200000;
  double z = 0.0, m = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double x = lo + (hi - lo) * i / n;
    const double wgt = (i == 0 || i == n ? 0.5 : 1.0) * std::exp(-p.n_beta * lh(x) - 0.5 * p.gamma * x * x);
    z += wgt;
    m += wgt * lh(x);
  }
  return m / z;
}

}  // namespace

TEST(PosteriorMoments, ScalarInversion) {
  auto m = posterior_moments(scalar(1.0, 0.0, 0.0));
  EXPECT_DOUBLE_EQ(m.cov(0, 0), 1.0 / 330.0);
  EXPECT_DOUBLE_EQ(m.mean[0], 0.3);
}

TEST(PosteriorMoments, PriorOnlyAndLargeGamma) {
  auto p = random_potential(3, 4);
  p.A.setZero();
  auto m = posterior_moments(p);
  EXPECT_LT((m.cov - Eigen::MatrixXd::Identity(3, 3) / 300.0).cwiseAbs().maxCoeff(), 1e-15);

  auto q = random_potential(3, 4);
  q.gamma = 1e9;
  auto mq = posterior_moments(q);
  EXPECT_LT((mq.cov * 1e9 - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(PosteriorMoments, InvariantViolations) {
  auto p = scalar(-1.0, 0.0, 0.0);
  EXPECT_THROW(posterior_moments(p), InvalidArgument);
  auto q = random_potential(2, 1);
  q.A(0, 1) += 0.5;
  EXPECT_THROW(posterior_moments(q), InvalidArgument);
  auto r = scalar(0.0, 0.0, 0.0, 0.0);
  EXPECT_THROW(posterior_moments(r), InvalidArgument);
}

TEST(AnalyticSusceptibility, ClosedFormCases) {
  EXPECT_DOUBLE_EQ(analytic_susceptibility(scalar(1.0, 1.0, 0.0)), -0.5 / (330.0 * 330.0));
  EXPECT_NEAR(analytic_susceptibility(scalar(1.0, 1.0, 0.0)), -4.591e-6, 5e-10);

  RandomPotentialOptions zero;
  zero.perturbation = RandomPotentialOptions::Perturbation::zero;
  zero.linear_term = true;
  EXPECT_EQ(analytic_susceptibility(random_potential(5, 2, zero)), 0.0);

  RandomPotentialOptions neg;
  neg.perturbation = RandomPotentialOptions::Perturbation::negative_a;
  auto p = random_potential(5, 3, neg);
  const Eigen::MatrixXd AS = p.A * posterior_moments(p).cov;
  EXPECT_NEAR(analytic_susceptibility(p), 0.5 * (AS * AS).trace(), 1e-18);
  EXPECT_GT(analytic_susceptibility(p), 0.0);
}

TEST(AnalyticSusceptibility, MatchesIsserlisSum) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto p = random_potential(4, seed);
    const auto S = posterior_moments(p).cov;
    EXPECT_NEAR(analytic_susceptibility(p), -isserlis_covariance(p.A, p.B, S), 1e-15);
  }
}

TEST(AnalyticLlc, ClosedFormCases) {
  EXPECT_DOUBLE_EQ(analytic_llc(scalar(1.0, 0.0, 0.0)), 1.0 / 22.0);
  auto p = random_potential(4, 1);
  p.A.setZero();
  EXPECT_EQ(analytic_llc(p), 0.0);
  auto q = random_potential(6, 2);
  q.A = Eigen::MatrixXd::Identity(6, 6);
  q.gamma = 0.0;
  EXPECT_NEAR(analytic_llc(q), 3.0, 1e-12);
}

TEST(AnalyticLlc, ShiftedMatchesQuadrature) {
  auto p = scalar(1.3, -0.7, 0.4);
  for (double dh : {0.1, 0.5, 1.0}) {
    EXPECT_NEAR(analytic_llc_shifted(p, dh), p.n_beta * quadrature_shifted_loss(p, dh), 1e-9) << dh;
  }
  EXPECT_DOUBLE_EQ(analytic_llc_shifted(p, 0.0), analytic_llc(p));
  EXPECT_THROW(analytic_fd_susceptibility(p, 0.0), InvalidArgument);
}

TEST(ExactSamples, MeanAndCovariance) {
  for (std::size_t d : {1u, 3u, 5u}) {
    auto p = random_potential(d, 12 + d);
    const auto m = posterior_moments(p);
    const std::size_t n = 100000;
    const Eigen::MatrixXd x = exact_posterior_draws(p, n, 5);
    const Eigen::VectorXd mean = x.colwise().mean().transpose();
    EXPECT_LT((mean - p.w_star).norm(), 4.0 * std::sqrt(m.cov.trace() / n));
    const Eigen::MatrixXd c = x.rowwise() - p.w_star.transpose();
    const Eigen::MatrixXd cov = c.transpose() * c / static_cast<double>(n);
    // Entry (i,j) has standard deviation sqrt((S_ii S_jj + S_ij^2) / n) <= sqrt(2/n) max S_ii.
    EXPECT_LT((cov - m.cov).cwiseAbs().maxCoeff(), 5.0 * std::sqrt(2.0 / n) * m.cov.diagonal().maxCoeff());
  }
}

TEST(ExactSamples, TraceRecordsQuadraticForms) {
  RandomPotentialOptions opt;
  opt.linear_term = true;
  auto p = random_potential(3, 6, opt);
  const auto x = exact_posterior_draws(p, 20, 8);
  const auto t = exact_gaussian_samples(p, 20, 8);
  ASSERT_EQ(t.size(), 20u);
  EXPECT_EQ(t.w_star_loss, 0.0);
  for (std::size_t i = 0; i < 20; ++i) {
    const Eigen::VectorXd w = x.row(static_cast<Eigen::Index>(i)).transpose();
    EXPECT_EQ(t.draws[i].base_loss, p.base_loss(w));
    EXPECT_NEAR(*t.draws[i].mixed_loss - t.draws[i].base_loss, p.delta_loss(w), 1e-15);
  }
}

TEST(ExactSamples, DeterministicAndSeeded) {
  auto p = random_potential(2, 3);
  auto a = exact_gaussian_samples(p, 50, 1), b = exact_gaussian_samples(p, 50, 1), c = exact_gaussian_samples(p, 50, 2);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(a.draws[i].base_loss, b.draws[i].base_loss);
  EXPECT_NE(a.draws[0].base_loss, c.draws[0].base_loss);
}

TEST(QuadraticProblem, GradientMatchesFiniteDifference) {
  RandomPotentialOptions opt;
  opt.linear_term = true;
  auto p = random_potential(4, 8, opt);
  QuadraticProblem prob(p, 0.3);
  std::vector<double> w = prob.w_star();
  for (auto& x : w) x += 0.05;
  std::vector<double> g(4);
  std::vector<std::size_t> idx{0};
  prob.loss_and_grad(w, idx, g);
  for (std::size_t i = 0; i < 4; ++i) {
    auto up = w, dn = w;
    up[i] += 1e-5;
    dn[i] -= 1e-5;
    std::vector<double> scratch(4);
    const double fd = (prob.loss_and_grad(up, idx, scratch) - prob.loss_and_grad(dn, idx, scratch)) / 2e-5;
    EXPECT_NEAR(g[i], fd, 1e-8);
  }
  const Eigen::VectorXd wv = Eigen::Map<Eigen::VectorXd>(w.data(), 4);
  EXPECT_NEAR(prob.mixed_loss(w, idx) - prob.loss_and_grad(w, idx, g), p.delta_loss(wv), 1e-14);
}
