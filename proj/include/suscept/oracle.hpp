#pragma once

// Gaussian ground truth. The base loss L(w) = 1/2 (w-w*)' A (w-w*) and the
// perturbation dL(w) = 1/2 (w-w*)' B (w-w*) + b'(w-w*) make the localized
// posterior N(w*, (n_beta A + gamma I)^-1), so every estimator target has a
// closed form.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "random.hpp"
#include "sampler.hpp"

namespace suscept {

struct QuadraticPotential {
  Eigen::MatrixXd A;
  Eigen::MatrixXd B;
  Eigen::VectorXd b;
  Eigen::VectorXd w_star;
  double gamma = 300.0;
  double n_beta = 30.0;

  std::size_t dim() const { return static_cast<std::size_t>(w_star.size()); }

  Eigen::MatrixXd precision() const {
    const auto d = w_star.size();
    return n_beta * A + gamma * Eigen::MatrixXd::Identity(d, d);
  }

  void validate() const {
    const auto d = w_star.size();
    detail::require(d >= 1, "QuadraticPotential: empty w_star");
    detail::require(A.rows() == d && A.cols() == d, "QuadraticPotential: A has wrong shape");
    detail::require(B.rows() == d && B.cols() == d, "QuadraticPotential: B has wrong shape");
    detail::require(b.size() == d, "QuadraticPotential: b has wrong length");
    detail::require(n_beta > 0.0 && gamma >= 0.0, "QuadraticPotential: need n_beta > 0 and gamma >= 0");
    const double scale = std::max(1.0, A.cwiseAbs().maxCoeff());
    detail::require((A - A.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * scale, "QuadraticPotential: A not symmetric");
    const double bscale = std::max(1.0, B.cwiseAbs().maxCoeff());
    detail::require((B - B.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * bscale, "QuadraticPotential: B not symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(A, Eigen::EigenvaluesOnly);
    detail::require(ea.eigenvalues().minCoeff() >= -1e-12 * scale, "QuadraticPotential: A not positive semidefinite");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ep(precision(), Eigen::EigenvaluesOnly);
    detail::require(ep.eigenvalues().minCoeff() > 0.0, "QuadraticPotential: precision not positive definite");
  }

  double base_loss(const Eigen::VectorXd& w) const {
    const Eigen::VectorXd x = w - w_star;
    return 0.5 * x.dot(A * x);
  }
  double delta_loss(const Eigen::VectorXd& w) const {
    const Eigen::VectorXd x = w - w_star;
    return 0.5 * x.dot(B * x) + b.dot(x);
  }
};

struct PosteriorMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

inline PosteriorMoments posterior_moments(const QuadraticPotential& p) {
  p.validate();
  const auto d = p.w_star.size();
  return {p.w_star, p.precision().llt().solve(Eigen::MatrixXd::Identity(d, d))};
}

/// -1/2 tr(A S B S).
inline double analytic_susceptibility(const QuadraticPotential& p) {
  const auto S = posterior_moments(p).cov;
  return -0.5 * (p.A * S * p.B * S).trace();
}

/// n_beta * 1/2 tr(A S).
inline double analytic_llc(const QuadraticPotential& p) {
  const auto S = posterior_moments(p).cov;
  return p.n_beta * 0.5 * (p.A * S).trace();
}

/// The potential with base loss L + dh * dL (same w*, gamma, n_beta). Its
/// posterior is N(w* + m, (n_beta (A + dh B) + gamma I)^-1) with
/// m = -P^-1 n_beta dh b.
struct ShiftedPosterior {
  Eigen::VectorXd offset;  // m, relative to w*
  Eigen::MatrixXd cov;
};

inline ShiftedPosterior shifted_posterior(const QuadraticPotential& p, double delta_h) {
  p.validate();
  const auto d = p.w_star.size();
  const Eigen::MatrixXd Ah = p.A + delta_h * p.B;
  const Eigen::MatrixXd P = p.n_beta * Ah + p.gamma * Eigen::MatrixXd::Identity(d, d);
  Eigen::LLT<Eigen::MatrixXd> llt(P);
  detail::require(llt.info() == Eigen::Success, "shifted_posterior: shifted precision not positive definite");
  return {llt.solve(-p.n_beta * delta_h * p.b), llt.solve(Eigen::MatrixXd::Identity(d, d))};
}

/// n_beta * (E[L_h] - L_h(w*)) under the shifted posterior, L_h = L + dh dL.
inline double analytic_llc_shifted(const QuadraticPotential& p, double delta_h) {
  const auto sp = shifted_posterior(p, delta_h);
  const Eigen::MatrixXd Ah = p.A + delta_h * p.B;
  const double mean_loss =
      0.5 * (Ah * sp.cov).trace() + 0.5 * sp.offset.dot(Ah * sp.offset) + delta_h * p.b.dot(sp.offset);
  return p.n_beta * mean_loss;
}

/// (lambda_h - lambda_0) / (n_beta^2 dh).
inline double analytic_fd_susceptibility(const QuadraticPotential& p, double delta_h) {
  detail::require(delta_h != 0.0, "analytic_fd_susceptibility: delta_h must be nonzero");
  return (analytic_llc_shifted(p, delta_h) - analytic_llc(p)) / (p.n_beta * p.n_beta * delta_h);
}

namespace detail {

/// count x d matrix of draws from N(mean, cov).
inline Eigen::MatrixXd gaussian_draws(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov, std::size_t count,
                                      std::uint64_t seed) {
  require(count >= 1, "exact samples: count must be >= 1");
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  require(llt.info() == Eigen::Success, "exact samples: covariance not positive definite");
  const Eigen::MatrixXd L = llt.matrixL();
  Rng rng = make_rng(seed, {0x6a55});
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto d = mean.size();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(count), d);
  Eigen::VectorXd z(d);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index k = 0; k < d; ++k) z[k] = normal(rng);
    out.row(i) = (mean + L * z).transpose();
  }
  return out;
}

inline ChainTrace gaussian_trace(const QuadraticPotential& p, const Eigen::MatrixXd& draws, double delta_h,
                                 std::uint64_t seed) {
  ChainTrace t;
  t.seed = seed;
  t.w_star_loss = 0.0;
  t.draws.reserve(static_cast<std::size_t>(draws.rows()));
  for (Eigen::Index i = 0; i < draws.rows(); ++i) {
    const Eigen::VectorXd w = draws.row(i).transpose();
    const double dl = p.delta_loss(w);
    const double base = p.base_loss(w) + delta_h * dl;
    t.draws.push_back({base, base + dl, {}});
  }
  return t;
}

}  // namespace detail

/// Exact posterior draws as rows.
inline Eigen::MatrixXd exact_posterior_draws(const QuadraticPotential& p, std::size_t count, std::uint64_t seed) {
  const auto m = posterior_moments(p);
  return detail::gaussian_draws(m.mean, m.cov, count, seed);
}

/// Independent exact posterior draws, L_mixed := L_base + dL.
inline ChainTrace exact_gaussian_samples(const QuadraticPotential& p, std::size_t count, std::uint64_t seed) {
  return detail::gaussian_trace(p, exact_posterior_draws(p, count, seed), 0.0, seed);
}

/// Exact draws from the posterior of L + dh dL; L_base records L + dh dL.
inline ChainTrace exact_shifted_samples(const QuadraticPotential& p, double delta_h, std::size_t count,
                                        std::uint64_t seed) {
  const auto sp = shifted_posterior(p, delta_h);
  return detail::gaussian_trace(p, detail::gaussian_draws(p.w_star + sp.offset, sp.cov, count, seed), delta_h, seed);
}

struct RandomPotentialOptions {
  enum class Perturbation { random, zero, negative_a, identity };
  Perturbation perturbation = Perturbation::random;
  bool linear_term = false;
  double a_scale = 1.0;
  double b_scale = 1.0;
  double gamma = 300.0;
  double n_beta = 30.0;
};

/// A = G G' / d * a_scale with Gaussian G; B symmetric Gaussian (or as chosen);
/// w* Gaussian.
inline QuadraticPotential random_potential(std::size_t dim, std::uint64_t seed, const RandomPotentialOptions& opt = {}) {
  detail::require(dim >= 1, "random_potential: dim must be >= 1");
  Rng rng = make_rng(seed, {0x0ac1e});
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto d = static_cast<Eigen::Index>(dim);
  auto gauss = [&](Eigen::Index r, Eigen::Index c) {
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = normal(rng);
    return m;
  };
  QuadraticPotential p;
  const Eigen::MatrixXd G = gauss(d, d);
  p.A = opt.a_scale * G * G.transpose() / static_cast<double>(d);
  p.A = 0.5 * (p.A + p.A.transpose()).eval();
  const Eigen::MatrixXd H = gauss(d, d);
  using P = RandomPotentialOptions::Perturbation;
  switch (opt.perturbation) {
    case P::random: p.B = opt.b_scale * 0.5 * (H + H.transpose()); break;
    case P::zero: p.B = Eigen::MatrixXd::Zero(d, d); break;
    case P::negative_a: p.B = -p.A; break;
    case P::identity: p.B = opt.b_scale * Eigen::MatrixXd::Identity(d, d); break;
  }
  const Eigen::VectorXd lin = gauss(d, 1);
  p.b = opt.linear_term ? Eigen::VectorXd(opt.b_scale * lin) : Eigen::VectorXd::Zero(d);
  p.w_star = gauss(d, 1);
  p.gamma = opt.gamma;
  p.n_beta = opt.n_beta;
  p.validate();
  return p;
}

/// The quadratic potential as a SamplingProblem. The "batch" is the whole
/// loss: populations are 1 and indices are ignored. base loss = L + dh dL,
/// mixed loss = base + dL.
class QuadraticProblem {
 public:
  explicit QuadraticProblem(const QuadraticPotential& p, double delta_h = 0.0) : p_(&p), delta_h_(delta_h) {
    p.validate();
  }

  std::size_t dim() const { return p_->dim(); }
  std::size_t base_population() const { return 1; }
  std::size_t mixed_population() const { return 1; }
  bool has_probes() const { return false; }
  std::vector<double> w_star() const { return {p_->w_star.data(), p_->w_star.data() + p_->w_star.size()}; }

  double loss_and_grad(std::span<const double> w, std::span<const std::size_t>, std::span<double> grad) const {
    const Eigen::VectorXd x = to_vec(w) - p_->w_star;
    const Eigen::MatrixXd Ah = p_->A + delta_h_ * p_->B;
    const Eigen::VectorXd g = Ah * x + delta_h_ * p_->b;
    for (Eigen::Index i = 0; i < g.size(); ++i) grad[i] = g[i];
    return 0.5 * x.dot(Ah * x) + delta_h_ * p_->b.dot(x);
  }
  double mixed_loss(std::span<const double> w, std::span<const std::size_t>) const {
    const Eigen::VectorXd v = to_vec(w);
    return p_->base_loss(v) + (delta_h_ + 1.0) * p_->delta_loss(v);
  }
  std::vector<double> probe_losses(std::span<const double>) const { return {}; }

 private:
  static Eigen::VectorXd to_vec(std::span<const double> w) {
    return Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
  }

  const QuadraticPotential* p_;
  double delta_h_;
};

static_assert(SamplingProblem<QuadraticProblem>);

}  // namespace suscept
