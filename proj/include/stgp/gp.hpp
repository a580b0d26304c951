#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "stgp/linalg.hpp"
#include "stgp/panel.hpp"
#include "stgp/rng.hpp"

namespace stgp {

enum class Likelihood { normal, poisson, bernoulli };

inline std::string likelihood_name(Likelihood l) {
  switch (l) {
    case Likelihood::normal: return "normal";
    case Likelihood::poisson: return "poisson";
    case Likelihood::bernoulli: return "bernoulli";
  }
  return "?";
}

inline Likelihood likelihood_from_name(const std::string& s) {
  if (s == "normal") return Likelihood::normal;
  if (s == "poisson") return Likelihood::poisson;
  if (s == "bernoulli") return Likelihood::bernoulli;
  throw std::invalid_argument("unknown likelihood '" + s + "'");
}

// Exact multivariate-normal conditioning of the missing block on the observed
// block:
//   mu    = K_mis,obs (K_obs + sigma2 I)^-1 y_obs
//   Sigma = K_mis - K_mis,obs (K_obs + sigma2 I)^-1 K_obs,mis
// Solves go through a symmetric factorization; no explicit inverse is formed.
// Mean handling is the caller's: pass residuals, add the mean back.
struct NormalPosterior {
  VectorXd mu;
  MatrixXd Sigma;
  double sigma2 = 0.0;
  JitteredLlt chol_obs;
};

inline NormalPosterior condition_normal(const VectorXd& y_obs, const MatrixXd& k_obs,
                                        const MatrixXd& k_mis_obs, const MatrixXd& k_mis,
                                        double sigma2) {
  if (k_obs.rows() != y_obs.size() || k_mis_obs.cols() != k_obs.rows() ||
      k_mis.rows() != k_mis_obs.rows() || k_mis.rows() != k_mis.cols())
    throw std::invalid_argument("condition_normal: block shapes are not conformable");
  if (sigma2 < 0.0) throw std::invalid_argument("condition_normal: sigma2 must be >= 0");
  NormalPosterior post;
  post.sigma2 = sigma2;
  post.chol_obs = chol_jitter(k_obs, sigma2);
  post.mu = k_mis_obs * post.chol_obs.llt.solve(y_obs);
  post.Sigma = k_mis - k_mis_obs * post.chol_obs.llt.solve(k_mis_obs.transpose());
  post.Sigma = 0.5 * (post.Sigma + post.Sigma.transpose()).eval();
  return post;
}

// n_draws x |mis| matrix of draws from N(mu, Sigma); the eigen route keeps
// exactly-singular posteriors (Sigma -> 0) sampling at the mean.
inline MatrixXd sample_predictive(const NormalPosterior& post, int n_draws, std::uint64_t seed) {
  if (n_draws < 1) throw std::invalid_argument("sample_predictive: n_draws must be >= 1");
  Rng rng(seed);
  return mvn_sample(post.mu, post.Sigma, n_draws, rng);
}

// Latent-model state: f over all cells plus mean components.
struct LatentState {
  VectorXd f;       // length N*T, unit-major
  double mu0 = 0.0;
  VectorXd beta;    // covariate coefficients, may be empty
  VectorXd delta;   // unit fixed effects, may be empty
};

struct LikelihoodSpec {
  Likelihood kind = Likelihood::normal;
  double sigma2 = 1.0;  // Normal only
};

inline double cell_linear_predictor(const PanelData& panel, const LatentState& state, int unit,
                                    int time) {
  double m = state.mu0 + state.f(panel.cell_index(unit, time));
  if (state.delta.size() > 0) m += state.delta(unit);
  if (state.beta.size() > 0)
    m += panel.covariates.row(panel.cell_index(unit, time)).dot(state.beta);
  return m;
}

inline double loglik_cell(const PanelData& panel, const LatentState& state,
                          const LikelihoodSpec& lik, int unit, int time) {
  const double y = panel.y(unit, time);
  const double m = cell_linear_predictor(panel, state, unit, time);
  switch (lik.kind) {
    case Likelihood::normal: {
      const double r = y - m;
      return -0.5 * (r * r / lik.sigma2 + std::log(lik.sigma2) + 1.8378770664093454836);
    }
    case Likelihood::poisson: {
      if (y < 0.0 || y != std::floor(y))
        throw std::invalid_argument("loglik: Poisson outcomes must be nonnegative integers");
      const double rate = std::exp(m) * panel.offset(unit, time);
      return y * std::log(rate) - rate - std::lgamma(y + 1.0);
    }
    case Likelihood::bernoulli: {
      if (y != 0.0 && y != 1.0)
        throw std::invalid_argument("loglik: Bernoulli outcomes must be 0 or 1");
      // log(p) = m - log(1+e^m), log(1-p) = -log(1+e^m)
      const double log1pe = m > 0.0 ? m + std::log1p(std::exp(-m)) : std::log1p(std::exp(m));
      return y * m - log1pe;
    }
  }
  throw std::logic_error("loglik: unknown likelihood");
}

inline double loglik_cells(const PanelData& panel, const LatentState& state,
                           const LikelihoodSpec& lik, const std::vector<CellId>& cells) {
  if (state.f.size() != panel.n_cells())
    throw std::invalid_argument("loglik: latent f must cover all cells");
  if (state.delta.size() > 0 && state.delta.size() != panel.n_units)
    throw std::invalid_argument("loglik: delta must have one entry per unit");
  double total = 0.0;
  for (const auto& c : cells) total += loglik_cell(panel, state, lik, c.unit, c.time);
  return total;
}

// Whole-panel log likelihood.
inline double loglik(const PanelData& panel, const LatentState& state, const LikelihoodSpec& lik) {
  std::vector<CellId> cells;
  cells.reserve(panel.n_cells());
  for (int i = 0; i < panel.n_units; ++i)
    for (int t = 0; t < panel.n_times; ++t) cells.push_back({i, t});
  return loglik_cells(panel, state, lik, cells);
}

}  // namespace stgp
