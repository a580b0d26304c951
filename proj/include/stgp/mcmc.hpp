#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "stgp/gp.hpp"
#include "stgp/kernels.hpp"
#include "stgp/obs_gaussian.hpp"
#include "stgp/panel.hpp"
#include "stgp/priors.hpp"
#include "stgp/rhat.hpp"

namespace stgp {

struct SamplerConfig {
  int chains = 4;
  int iters = 1000;
  int burn_in = 500;
  std::uint64_t seed = 20250829;
  int jobs = 1;            // chains run in parallel when > 1; results identical either way
  bool keep_latent = true; // store latent f draws (non-Gaussian likelihoods)
};

// Posterior draws plus everything needed to rebuild per-draw kernels:
// per-chain matrices of parameter draws (kept iterations x params) and
// counterfactual draws of Y(0) over the mis cells.
struct ChainSet {
  std::vector<std::string> param_names;
  std::vector<MatrixXd> params;    // per chain: kept x P
  std::vector<MatrixXd> cf;        // per chain: kept x |mis|, outcome scale
  std::vector<MatrixXd> latent_f;  // per chain: kept x (N*T); empty for Normal fits
  std::vector<CellId> mis_cells;
  std::vector<std::uint64_t> chain_seeds;
  KernelFamily fam = KernelFamily::rbf_rbf;
  Likelihood lik = Likelihood::normal;
  SamplerConfig config;
  int n_units = 0, n_times = 0;
  int rank_j = 0;          // ICM only
  bool learned_phi = false;
  MatrixXd fixed_phi;      // ICM with given factors

  int kept() const { return config.iters - config.burn_in; }

  int param_index(const std::string& name) const {
    for (std::size_t i = 0; i < param_names.size(); ++i)
      if (param_names[i] == name) return static_cast<int>(i);
    throw std::invalid_argument("ChainSet: no parameter named '" + name + "'");
  }

  bool has_param(const std::string& name) const {
    for (const auto& n : param_names)
      if (n == name) return true;
    return false;
  }

  std::vector<VectorXd> chains_of(const std::string& name) const {
    const int j = param_index(name);
    std::vector<VectorXd> out;
    for (const auto& m : params) out.push_back(m.col(j));
    return out;
  }

  VectorXd pooled(const std::string& name) const {
    const int j = param_index(name);
    VectorXd out(static_cast<Eigen::Index>(params.size()) * kept());
    Eigen::Index at = 0;
    for (const auto& m : params) {
      out.segment(at, m.rows()) = m.col(j);
      at += m.rows();
    }
    return out;
  }

  double posterior_median(const std::string& name) const { return quantile(pooled(name), 0.5); }

  // All counterfactual draws stacked chain-major: (chains*kept) x |mis|.
  MatrixXd stacked_cf() const {
    MatrixXd out(static_cast<Eigen::Index>(cf.size()) * kept(), mis_cells.size());
    Eigen::Index at = 0;
    for (const auto& m : cf) {
      out.middleRows(at, m.rows()) = m;
      at += m.rows();
    }
    return out;
  }
};

namespace detail {

// Reference to one (possibly strided) matrix row.
using RowRef = Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>>;

enum class Transform { log_positive, logit_unit };

inline double to_natural(Transform tf, double z) {
  switch (tf) {
    case Transform::log_positive: return std::exp(z);
    case Transform::logit_unit: return 1.0 / (1.0 + std::exp(-z));
  }
  return z;
}

inline double to_transformed(Transform tf, double x) {
  switch (tf) {
    case Transform::log_positive: return std::log(x);
    case Transform::logit_unit: return std::log(x) - std::log1p(-x);
  }
  return x;
}

inline double log_jacobian(Transform tf, double x) {
  switch (tf) {
    case Transform::log_positive: return std::log(x);
    case Transform::logit_unit: return std::log(x) + std::log1p(-x);
  }
  return 0.0;
}

struct HyperLayout {
  std::vector<std::string> names;
  std::vector<Transform> tf;

  int size() const { return static_cast<int>(names.size()); }
  int index(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    return -1;
  }
};

inline HyperLayout hyper_layout(KernelFamily fam, Likelihood lik) {
  HyperLayout lo;
  auto pos = [&](const char* n) {
    lo.names.emplace_back(n);
    lo.tf.push_back(Transform::log_positive);
  };
  auto unit = [&](const char* n) {
    lo.names.emplace_back(n);
    lo.tf.push_back(Transform::logit_unit);
  };
  switch (fam) {
    case KernelFamily::gneiting:
      pos("tau2"); pos("l_s"); pos("l_t");
      unit("alpha"); unit("gamma"); unit("eta");
      break;
    case KernelFamily::rbf_rbf:
      pos("tau2"); pos("l_s"); pos("l_t");
      break;
    case KernelFamily::icm_rbf:
      pos("l_t");
      break;
  }
  if (lik == Likelihood::normal) pos("sigma2");
  return lo;
}

inline KernelParams make_kernel(KernelFamily fam, const HyperLayout& lo, const VectorXd& nat,
                                const MatrixXd& phi, int rank_j) {
  switch (fam) {
    case KernelFamily::gneiting: {
      GneitingParams g;
      g.tau2 = nat(lo.index("tau2"));
      g.l_s = nat(lo.index("l_s"));
      g.l_t = nat(lo.index("l_t"));
      g.alpha = std::max(nat(lo.index("alpha")), kExponentEdge);
      g.gamma = std::max(nat(lo.index("gamma")), kExponentEdge);
      g.eta = nat(lo.index("eta"));
      return g;
    }
    case KernelFamily::rbf_rbf: {
      RbfRbfParams r;
      r.tau2 = nat(lo.index("tau2"));
      r.l_s = nat(lo.index("l_s"));
      r.l_t = nat(lo.index("l_t"));
      return r;
    }
    case KernelFamily::icm_rbf: {
      IcmRbfParams p;
      p.l_t = nat(lo.index("l_t"));
      p.rank_j = rank_j;
      p.phi = phi;
      return p;
    }
  }
  throw std::logic_error("make_kernel: unknown family");
}

inline double log_prior_hyper(const HyperLayout& lo, const VectorXd& nat, const PriorSpec& priors) {
  double lp = 0.0;
  for (int i = 0; i < lo.size(); ++i) {
    lp += log_pdf(prior_for(priors, lo.names[i]), nat(i));
    if (!std::isfinite(lp)) return kNegInf;
  }
  return lp;
}

inline double log_jacobian_sum(const HyperLayout& lo, const VectorXd& nat) {
  double lj = 0.0;
  for (int i = 0; i < lo.size(); ++i) lj += log_jacobian(lo.tf[i], nat(i));
  return lj;
}

// Haario-style adaptive random-walk proposal for a block of transformed
// parameters: empirical covariance plus Robbins-Monro scale tuning, adapted
// during burn-in only so the post-burn-in kernel is a fixed Metropolis.
class AdaptiveBlock {
 public:
  AdaptiveBlock(int dim, double target_accept, double init_scale = 0.1)
      : dim_(dim),
        target_(target_accept),
        log_scale_(std::log(init_scale)),
        mean_(VectorXd::Zero(dim)),
        m2_(MatrixXd::Zero(dim, dim)),
        chol_(MatrixXd::Identity(dim, dim)) {}

  VectorXd propose(const VectorXd& z, Rng& rng) const {
    VectorXd xi(dim_);
    for (int i = 0; i < dim_; ++i) xi(i) = rng.normal();
    return z + std::exp(log_scale_) * (chol_ * xi);
  }

  void learn(const VectorXd& z, double accept_prob, bool adapting) {
    if (!adapting) return;
    ++n_;
    const double w = 1.0 / static_cast<double>(n_);
    const VectorXd d = z - mean_;
    mean_ += w * d;
    m2_ += d * (z - mean_).transpose();
    log_scale_ += (accept_prob - target_) / std::pow(static_cast<double>(n_), 0.7) * 2.0;
    if (n_ >= 2 * dim_ + 20 && n_ % 20 == 0) {
      MatrixXd cov = m2_ / static_cast<double>(n_ - 1);
      cov.diagonal().array() += 1e-9;
      Eigen::LLT<MatrixXd> llt(cov * (5.76 / std::max(1, dim_)));  // 2.4^2/d
      if (llt.info() == Eigen::Success) chol_ = llt.matrixL();
    }
  }

 private:
  int dim_;
  double target_;
  double log_scale_;
  long n_ = 0;
  VectorXd mean_;
  MatrixXd m2_;
  MatrixXd chol_;
};

// Scalar random-walk scale with Robbins-Monro adaptation.
class AdaptiveScalar {
 public:
  explicit AdaptiveScalar(double target_accept = 0.44, double init_scale = 0.5)
      : target_(target_accept), log_scale_(std::log(init_scale)) {}
  double scale() const { return std::exp(log_scale_); }
  void learn(double accept_prob, bool adapting) {
    if (!adapting) return;
    ++n_;
    log_scale_ += (accept_prob - target_) / std::pow(static_cast<double>(n_), 0.7);
  }

 private:
  double target_;
  double log_scale_;
  long n_ = 0;
};

// Univariate stepping-out slice move (Neal 2003) along one coordinate of a
// transformed parameter vector. `target1d` evaluates the full log target as a
// function of that coordinate. Returns the new coordinate and writes the
// target value there.
template <typename F>
double slice_coord(Rng& rng, double x0, double f0, F&& target1d, double w, double* f_out) {
  const double logy = f0 + std::log(1.0 - rng.uniform());
  double lo = x0 - w * rng.uniform();
  double hi = lo + w;
  for (int s = 0; s < 8 && target1d(lo) > logy; ++s) lo -= w;
  for (int s = 0; s < 8 && target1d(hi) > logy; ++s) hi += w;
  for (int it = 0; it < 100; ++it) {
    const double cand = rng.uniform(lo, hi);
    const double fc = target1d(cand);
    if (fc > logy) {
      *f_out = fc;
      return cand;
    }
    (cand < x0 ? lo : hi) = cand;
  }
  *f_out = f0;
  return x0;
}

// One elliptical-slice move for a vector with N(0, *) prior realized by the
// draw `nu`; returns the new state and its log likelihood.
template <typename LogLikFn>
std::pair<VectorXd, double> ess_move(Rng& rng, const VectorXd& x, double cur_ll, const VectorXd& nu,
                                     LogLikFn&& loglik) {
  const double tau = 6.283185307179586476925286766559;
  const double logy = cur_ll + std::log(1.0 - rng.uniform());
  double theta = rng.uniform(0.0, tau);
  double lo = theta - tau, hi = theta;
  for (int it = 0; it < 1000; ++it) {
    const VectorXd cand = std::cos(theta) * x + std::sin(theta) * nu;
    const double ll = loglik(cand);
    if (ll > logy) return {cand, ll};
    (theta < 0.0 ? lo : hi) = theta;
    theta = rng.uniform(lo, hi);
  }
  return {x, cur_ll};  // bracket collapsed to the current point
}

// Cholesky factor of the latent prior K over the full grid, with the
// separable Kronecker structure kept factorized.
struct PriorChol {
  bool kron = false;
  MatrixXd lu, lt;      // lower factors of K_unit, K_time
  MatrixXd ldense;      // lower factor of dense K
  int n = 0, t = 0;

  VectorXd apply_lower(const VectorXd& v) const {
    if (!kron) return ldense.triangularView<Eigen::Lower>() * v;
    Eigen::Map<const MatrixXd> m(v.data(), t, n);
    MatrixXd r = lt.triangularView<Eigen::Lower>() * m * lu.transpose();
    return Eigen::Map<VectorXd>(r.data(), n * t);
  }

  VectorXd solve_lower(const VectorXd& f) const {
    if (!kron) return ldense.triangularView<Eigen::Lower>().solve(f);
    Eigen::Map<const MatrixXd> m(f.data(), t, n);
    MatrixXd half = lt.triangularView<Eigen::Lower>().solve(MatrixXd(m));
    MatrixXd r = lu.triangularView<Eigen::Lower>().solve(half.transpose()).transpose();
    return Eigen::Map<VectorXd>(r.data(), n * t);
  }

  VectorXd sample(Rng& rng) const {
    VectorXd z(n * t);
    for (int i = 0; i < n * t; ++i) z(i) = rng.normal();
    return apply_lower(z);
  }
};

inline PriorChol build_prior_chol(const PanelData& panel, const KernelEvaluator& eval,
                                  const KernelParams& params, const std::vector<CellId>& all) {
  PriorChol pc;
  pc.n = panel.n_units;
  pc.t = panel.n_times;
  if (is_separable(family(params))) {
    pc.kron = true;
    pc.lu = MatrixXd(chol_jitter(unit_covariance(panel, params)).llt.matrixL());
    pc.lt = MatrixXd(chol_jitter(time_covariance(panel, params)).llt.matrixL());
  } else {
    pc.ldense = MatrixXd(chol_jitter(eval.cross(params, all, all)).llt.matrixL());
  }
  return pc;
}

}  // namespace detail

// ---------------------------------------------------------------------------

// Posterior sampling. Normal outcomes use the marginalized form
// y_obs ~ MVN(W c, K_obs + sigma2 I) with Gibbs draws for the mean
// coefficients, an adaptive Metropolis block on transformed kernel
// hyperparameters, and elliptical slice updates for learned ICM factors.
// Poisson/Bernoulli outcomes keep the latent field f explicit: elliptical
// slice for f, whitened Metropolis for the hyperparameters (f = L(theta) nu
// held fixed through nu), and scalar Metropolis for mu0/delta/beta.
// Counterfactual Y(0) draws for the mis cells are emitted at every kept
// iteration.
ChainSet run_mcmc(const PanelData& panel, const KernelParams& kernel_template, Likelihood lik,
                  const PriorSpec& priors, const SamplerConfig& config);

// Predictive Y(0) draws for `targets` conditioning only on `conditioning`
// cells, one draw per (thinned) kept posterior draw. This is the
// leave-block-out evaluation used for pre-treatment fit checks: the target
// block never enters the GP conditioning set.
MatrixXd posterior_block_predict(const PanelData& panel, const ChainSet& chains,
                                 const std::vector<CellId>& targets,
                                 const std::vector<CellId>& conditioning, int thin = 1);

struct FitReport {
  std::map<std::string, double> rhat_by_param;  // scalar hyperparameters + mean terms
  double avg_cf_rhat = 0.0;                     // averaged over mis cells
  double max_cf_rhat = 0.0;
  std::vector<std::string> flagged;             // quantities with R-hat >= threshold
  double threshold = 1.05;
  bool converged = true;
};

FitReport fit_report(const ChainSet& chains, double threshold = 1.05);

// ---------------------------------------------------------------------------
// implementation

namespace detail {

struct ChainOutput {
  MatrixXd params;
  MatrixXd cf;
  MatrixXd latent_f;
};

struct ProblemSpec {
  const PanelData* panel;
  const KernelEvaluator* eval;
  ObsMisPartition part;
  std::vector<CellId> all_cells;
  KernelFamily fam;
  Likelihood lik;
  PriorSpec priors;
  HyperLayout layout;
  int rank_j = 0;
  bool learn_phi = false;
  MatrixXd fixed_phi;
  VectorXd y_obs;
  MatrixXd w_obs, w_mis;  // mean designs (Normal path)
  std::vector<std::string> param_names;
};

inline double empirical_mu0(const PanelData& panel, const std::vector<CellId>& obs,
                            Likelihood lik) {
  double acc = 0.0;
  for (const auto& c : obs) {
    switch (lik) {
      case Likelihood::normal: acc += panel.y(c.unit, c.time); break;
      case Likelihood::poisson: acc += panel.y(c.unit, c.time) / panel.offset(c.unit, c.time); break;
      case Likelihood::bernoulli: acc += panel.y(c.unit, c.time); break;
    }
  }
  const double mean = acc / static_cast<double>(obs.size());
  switch (lik) {
    case Likelihood::normal: return mean;
    case Likelihood::poisson: return std::log(std::max(mean, 1e-8));
    case Likelihood::bernoulli: {
      const double p = std::min(std::max(mean, 1e-3), 1.0 - 1e-3);
      return std::log(p / (1.0 - p));
    }
  }
  return 0.0;
}

// --- Normal (marginalized) chain -------------------------------------------

class NormalChain {
 public:
  NormalChain(const ProblemSpec& ps, std::uint64_t seed)
      : ps_(ps), rng_(seed), hyper_block_(ps.layout.size(), 0.3) {
    // init: prior medians for hyperparameters, least squares for the mean.
    nat_ = VectorXd(ps_.layout.size());
    for (int i = 0; i < ps_.layout.size(); ++i)
      nat_(i) = median(prior_for(ps_.priors, ps_.layout.names[i]));
    if (ps_.learn_phi) {
      phi_ = MatrixXd(ps_.panel->n_units, ps_.rank_j);
      for (int i = 0; i < phi_.rows(); ++i)
        for (int j = 0; j < phi_.cols(); ++j) phi_(i, j) = rng_.normal();
    } else {
      phi_ = ps_.fixed_phi;
    }
    coef_ = ps_.w_obs.colPivHouseholderQr().solve(ps_.y_obs);
    rebuild();
    resid_ = ps_.y_obs - ps_.w_obs * coef_;
    cur_ll_ = og_->loglik(resid_);
    if (!std::isfinite(cur_ll_ + log_prior_hyper(ps_.layout, nat_, ps_.priors)))
      throw std::runtime_error("run_mcmc: non-finite log posterior at initialization");
  }

  void iterate(bool adapting) {
    if (is_separable(ps_.fam)) {
      // cheap per-evaluation path: coordinate slice moves mix far better
      slice_hyper();
    } else {
      update_hyper(adapting);
      update_hyper(adapting);
    }
    if (ps_.learn_phi) update_phi();
    update_coef();
  }

  void record(RowRef param_row, RowRef cf_row) {
    int at = 0;
    for (int i = 0; i < ps_.layout.size(); ++i) param_row(at++) = nat_(i);
    for (int i = 0; i < coef_.size(); ++i) param_row(at++) = coef_(i);
    if (ps_.learn_phi)
      for (int i = 0; i < phi_.rows(); ++i)
        for (int j = 0; j < phi_.cols(); ++j) param_row(at++) = phi_(i, j);

    // Posterior predictive draw of Y(0) over the mis cells, data scale
    // (the sigma2 block of the joint enters through the Schur complement).
    const double sigma2 = nat_(ps_.layout.index("sigma2"));
    const VectorXd mean_mis = ps_.w_mis * coef_;
    VectorXd mu;
    MatrixXd cov;
    if (og_->is_separable()) {
      mu = og_->predictive_mean(resid_);
      cov = og_->schur_mis();
    } else {
      const KernelParams params = current_kernel();
      const MatrixXd k_mo = ps_.eval->cross(params, ps_.part.mis, ps_.part.obs);
      const MatrixXd k_mis = ps_.eval->cross(params, ps_.part.mis, ps_.part.mis);
      mu = k_mo * og_->solve(resid_);
      cov = k_mis - k_mo * og_->solve(MatrixXd(k_mo.transpose()));
      cov.diagonal().array() += sigma2;
      cov = 0.5 * (cov + cov.transpose()).eval();
    }
    cf_row = mvn_sample(mean_mis + mu, cov, 1, rng_).row(0);
  }

  KernelParams current_kernel() const {
    return make_kernel(ps_.fam, ps_.layout, nat_, phi_, ps_.rank_j);
  }

 private:
  void rebuild() {
    const KernelParams params = current_kernel();
    const double sigma2 = nat_(ps_.layout.index("sigma2"));
    if (is_separable(ps_.fam)) {
      og_ = std::make_unique<ObsGaussian>(ObsGaussian::separable(
          unit_covariance(*ps_.panel, params), time_covariance(*ps_.panel, params), sigma2,
          ps_.part.obs, ps_.part.mis, ps_.panel->n_times));
    } else {
      og_ = std::make_unique<ObsGaussian>(
          ObsGaussian::dense(ps_.eval->cross(params, ps_.part.obs, ps_.part.obs), sigma2));
    }
    ainv_w_.reset();
  }

  void update_hyper(bool adapting) {
    VectorXd z(nat_.size());
    for (int i = 0; i < nat_.size(); ++i) z(i) = to_transformed(ps_.layout.tf[i], nat_(i));
    const VectorXd z_prop = hyper_block_.propose(z, rng_);
    VectorXd nat_prop(nat_.size());
    for (int i = 0; i < nat_.size(); ++i) nat_prop(i) = to_natural(ps_.layout.tf[i], z_prop(i));
    const double lp_prop = log_prior_hyper(ps_.layout, nat_prop, ps_.priors);
    double accept_prob = 0.0;
    if (std::isfinite(lp_prop)) {
      const VectorXd nat_keep = nat_;
      auto og_keep = std::move(og_);
      auto ainv_keep = std::move(ainv_w_);
      nat_ = nat_prop;
      bool ok = true;
      double ll_prop = kNegInf;
      try {
        rebuild();
        ll_prop = og_->loglik(resid_);
      } catch (const std::runtime_error&) {
        ok = false;
      }
      const double cur_lp = log_prior_hyper(ps_.layout, nat_keep, ps_.priors);
      const double ratio = ok ? (ll_prop + lp_prop + log_jacobian_sum(ps_.layout, nat_prop)) -
                                    (cur_ll_ + cur_lp + log_jacobian_sum(ps_.layout, nat_keep))
                              : kNegInf;
      accept_prob = std::isfinite(ratio) ? std::min(1.0, std::exp(ratio)) : 0.0;
      if (ok && std::log(1.0 - rng_.uniform()) < ratio) {
        cur_ll_ = ll_prop;
        z = z_prop;
      } else {
        nat_ = nat_keep;
        og_ = std::move(og_keep);
        ainv_w_ = std::move(ainv_keep);
      }
    }
    hyper_block_.learn(z, accept_prob, adapting);
  }

  // full log target (likelihood + priors + transform jacobian) at transformed z
  double hyper_target(const VectorXd& z) const {
    VectorXd nat(z.size());
    for (int i = 0; i < z.size(); ++i) nat(i) = to_natural(ps_.layout.tf[i], z(i));
    const double lp = log_prior_hyper(ps_.layout, nat, ps_.priors);
    if (!std::isfinite(lp)) return kNegInf;
    try {
      const KernelParams params = make_kernel(ps_.fam, ps_.layout, nat, phi_, ps_.rank_j);
      const double sigma2 = nat(ps_.layout.index("sigma2"));
      const ObsGaussian og = ObsGaussian::separable(
          unit_covariance(*ps_.panel, params), time_covariance(*ps_.panel, params), sigma2,
          ps_.part.obs, ps_.part.mis, ps_.panel->n_times);
      return og.loglik(resid_) + lp + log_jacobian_sum(ps_.layout, nat);
    } catch (const std::runtime_error&) {
      return kNegInf;
    }
  }

  void slice_hyper() {
    VectorXd z(nat_.size());
    for (int i = 0; i < nat_.size(); ++i) z(i) = to_transformed(ps_.layout.tf[i], nat_(i));
    double f = hyper_target(z);
    for (int i = 0; i < z.size(); ++i) {
      const double w = ps_.layout.tf[i] == Transform::logit_unit ? 2.0 : 1.0;
      auto target1d = [&](double v) {
        VectorXd zc = z;
        zc(i) = v;
        return hyper_target(zc);
      };
      z(i) = slice_coord(rng_, z(i), f, target1d, w, &f);
    }
    for (int i = 0; i < z.size(); ++i) nat_(i) = to_natural(ps_.layout.tf[i], z(i));
    rebuild();
    cur_ll_ = og_->loglik(resid_);
  }

  void update_phi() {
    VectorXd x = Eigen::Map<VectorXd>(phi_.data(), phi_.size());
    VectorXd nu(x.size());
    for (int i = 0; i < nu.size(); ++i) nu(i) = rng_.normal();
    MatrixXd phi_work = phi_;
    auto loglik = [&](const VectorXd& cand) {
      phi_work = Eigen::Map<const MatrixXd>(cand.data(), phi_.rows(), phi_.cols());
      const KernelParams params =
          make_kernel(ps_.fam, ps_.layout, nat_, phi_work, ps_.rank_j);
      const double sigma2 = nat_(ps_.layout.index("sigma2"));
      const ObsGaussian og = ObsGaussian::separable(
          unit_covariance(*ps_.panel, params), time_covariance(*ps_.panel, params), sigma2,
          ps_.part.obs, ps_.part.mis, ps_.panel->n_times);
      return og.loglik(resid_);
    };
    auto [x_new, ll_new] = ess_move(rng_, x, cur_ll_, nu, loglik);
    phi_ = Eigen::Map<const MatrixXd>(x_new.data(), phi_.rows(), phi_.cols());
    cur_ll_ = ll_new;
    rebuild();
  }

  void update_coef() {
    if (!ainv_w_) ainv_w_ = std::make_unique<MatrixXd>(og_->solve(ps_.w_obs));
    const int q = static_cast<int>(ps_.w_obs.cols());
    MatrixXd g = ps_.w_obs.transpose() * (*ainv_w_);
    g = 0.5 * (g + g.transpose()).eval();
    g.diagonal().array() += 1e-10;
    Eigen::LLT<MatrixXd> llt(g);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("run_mcmc: singular design in coefficient update");
    const VectorXd mean = llt.solve(ainv_w_->transpose() * ps_.y_obs);
    VectorXd z(q);
    for (int i = 0; i < q; ++i) z(i) = rng_.normal();
    coef_ = mean + llt.matrixU().solve(z);
    resid_ = ps_.y_obs - ps_.w_obs * coef_;
    cur_ll_ = og_->loglik(resid_);
  }

  const ProblemSpec& ps_;
  Rng rng_;
  AdaptiveBlock hyper_block_;
  VectorXd nat_;
  MatrixXd phi_;
  VectorXd coef_;
  VectorXd resid_;
  std::unique_ptr<ObsGaussian> og_;
  std::unique_ptr<MatrixXd> ainv_w_;
  double cur_ll_ = 0.0;
};

// --- latent-field chain (Poisson / Bernoulli) -------------------------------

class LatentChain {
 public:
  LatentChain(const ProblemSpec& ps, std::uint64_t seed)
      : ps_(ps),
        rng_(seed),
        hyper_block_(ps.layout.size(), 0.3),
        mu0_scale_(0.44, 0.25),
        delta_scale_(0.44, 0.25),
        beta_block_(std::max<int>(1, static_cast<int>(ps.panel->covariates.cols())), 0.3) {
    nat_ = VectorXd(ps_.layout.size());
    for (int i = 0; i < ps_.layout.size(); ++i)
      nat_(i) = median(prior_for(ps_.priors, ps_.layout.names[i]));
    if (ps_.learn_phi) {
      phi_ = MatrixXd(ps_.panel->n_units, ps_.rank_j);
      for (int i = 0; i < phi_.rows(); ++i)
        for (int j = 0; j < phi_.cols(); ++j) phi_(i, j) = rng_.normal();
    } else {
      phi_ = ps_.fixed_phi;
    }
    state_.f = VectorXd::Zero(ps_.panel->n_cells());
    state_.mu0 = empirical_mu0(*ps_.panel, ps_.part.obs, ps_.lik);
    if (ps_.panel->unit_fixed_effects) state_.delta = VectorXd::Zero(ps_.panel->n_units);
    if (ps_.panel->covariates.cols() > 0)
      state_.beta = VectorXd::Zero(ps_.panel->covariates.cols());
    chol_ = build_prior_chol(*ps_.panel, *ps_.eval, current_kernel(), ps_.all_cells);
    cur_ll_ = loglik_cells(*ps_.panel, state_, {ps_.lik, 0.0}, ps_.part.obs);
    if (!std::isfinite(cur_ll_ + log_prior_hyper(ps_.layout, nat_, ps_.priors)))
      throw std::runtime_error("run_mcmc: non-finite log posterior at initialization");
  }

  void iterate(bool adapting) {
    if (is_separable(ps_.fam)) {
      slice_hyper();
    } else {
      update_hyper(adapting);
      update_hyper(adapting);
    }
    if (ps_.learn_phi) update_phi();
    update_f();
    update_mu0(adapting);
    if (state_.delta.size() > 0) update_delta(adapting);
    if (state_.beta.size() > 0) update_beta(adapting);
  }

  void record(RowRef param_row, RowRef cf_row, RowRef f_row) {
    int at = 0;
    for (int i = 0; i < ps_.layout.size(); ++i) param_row(at++) = nat_(i);
    param_row(at++) = state_.mu0;
    for (int i = 0; i < state_.delta.size(); ++i) param_row(at++) = state_.delta(i);
    for (int i = 0; i < state_.beta.size(); ++i) param_row(at++) = state_.beta(i);
    if (ps_.learn_phi)
      for (int i = 0; i < phi_.rows(); ++i)
        for (int j = 0; j < phi_.cols(); ++j) param_row(at++) = phi_(i, j);

    for (std::size_t k = 0; k < ps_.part.mis.size(); ++k) {
      const auto& c = ps_.part.mis[k];
      const double m = cell_linear_predictor(*ps_.panel, state_, c.unit, c.time);
      if (ps_.lik == Likelihood::poisson) {
        cf_row(k) = static_cast<double>(rng_.poisson(std::exp(m) * ps_.panel->offset(c.unit, c.time)));
      } else {
        cf_row(k) = rng_.uniform() < 1.0 / (1.0 + std::exp(-m)) ? 1.0 : 0.0;
      }
    }
    if (f_row.size() > 0) f_row = state_.f.transpose();
  }

  KernelParams current_kernel() const {
    return make_kernel(ps_.fam, ps_.layout, nat_, phi_, ps_.rank_j);
  }

 private:
  double data_ll(const VectorXd& f) {
    LatentState s = state_;
    s.f = f;
    return loglik_cells(*ps_.panel, s, {ps_.lik, 0.0}, ps_.part.obs);
  }

  void update_hyper(bool adapting) {
    VectorXd z(nat_.size());
    for (int i = 0; i < nat_.size(); ++i) z(i) = to_transformed(ps_.layout.tf[i], nat_(i));
    const VectorXd z_prop = hyper_block_.propose(z, rng_);
    VectorXd nat_prop(nat_.size());
    for (int i = 0; i < nat_.size(); ++i) nat_prop(i) = to_natural(ps_.layout.tf[i], z_prop(i));
    const double lp_prop = log_prior_hyper(ps_.layout, nat_prop, ps_.priors);
    double accept_prob = 0.0;
    if (std::isfinite(lp_prop)) {
      const VectorXd nu = chol_.solve_lower(state_.f);  // whitened field held fixed
      const VectorXd nat_keep = nat_;
      nat_ = nat_prop;
      bool ok = true;
      PriorChol chol_prop;
      VectorXd f_prop;
      double ll_prop = kNegInf;
      try {
        chol_prop = build_prior_chol(*ps_.panel, *ps_.eval, current_kernel(), ps_.all_cells);
        f_prop = chol_prop.apply_lower(nu);
        ll_prop = data_ll(f_prop);
      } catch (const std::runtime_error&) {
        ok = false;
      }
      const double cur_lp = log_prior_hyper(ps_.layout, nat_keep, ps_.priors);
      const double ratio = ok ? (ll_prop + lp_prop + log_jacobian_sum(ps_.layout, nat_prop)) -
                                    (cur_ll_ + cur_lp + log_jacobian_sum(ps_.layout, nat_keep))
                              : kNegInf;
      accept_prob = std::isfinite(ratio) ? std::min(1.0, std::exp(ratio)) : 0.0;
      if (ok && std::log(1.0 - rng_.uniform()) < ratio) {
        chol_ = std::move(chol_prop);
        state_.f = f_prop;
        cur_ll_ = ll_prop;
        z = z_prop;
      } else {
        nat_ = nat_keep;
      }
    }
    hyper_block_.learn(z, accept_prob, adapting);
  }

  // Whitened slice moves: the field is re-expressed as f = L(theta) nu with
  // nu held fixed while theta moves, so the Gaussian-prior term cancels.
  double hyper_target_whitened(const VectorXd& z, const VectorXd& nu_white) {
    VectorXd nat(z.size());
    for (int i = 0; i < z.size(); ++i) nat(i) = to_natural(ps_.layout.tf[i], z(i));
    const double lp = log_prior_hyper(ps_.layout, nat, ps_.priors);
    if (!std::isfinite(lp)) return kNegInf;
    try {
      const KernelParams params = make_kernel(ps_.fam, ps_.layout, nat, phi_, ps_.rank_j);
      const PriorChol pc = build_prior_chol(*ps_.panel, *ps_.eval, params, ps_.all_cells);
      return data_ll(pc.apply_lower(nu_white)) + lp + log_jacobian_sum(ps_.layout, nat);
    } catch (const std::runtime_error&) {
      return kNegInf;
    }
  }

  void slice_hyper() {
    const VectorXd nu_white = chol_.solve_lower(state_.f);
    VectorXd z(nat_.size());
    for (int i = 0; i < nat_.size(); ++i) z(i) = to_transformed(ps_.layout.tf[i], nat_(i));
    double f = hyper_target_whitened(z, nu_white);
    for (int i = 0; i < z.size(); ++i) {
      const double w = ps_.layout.tf[i] == Transform::logit_unit ? 2.0 : 1.0;
      auto target1d = [&](double v) {
        VectorXd zc = z;
        zc(i) = v;
        return hyper_target_whitened(zc, nu_white);
      };
      z(i) = slice_coord(rng_, z(i), f, target1d, w, &f);
    }
    for (int i = 0; i < z.size(); ++i) nat_(i) = to_natural(ps_.layout.tf[i], z(i));
    chol_ = build_prior_chol(*ps_.panel, *ps_.eval, current_kernel(), ps_.all_cells);
    state_.f = chol_.apply_lower(nu_white);
    cur_ll_ = data_ll(state_.f);
  }

  void update_phi() {
    const VectorXd nu_white = chol_.solve_lower(state_.f);
    VectorXd x = Eigen::Map<VectorXd>(phi_.data(), phi_.size());
    VectorXd nu(x.size());
    for (int i = 0; i < nu.size(); ++i) nu(i) = rng_.normal();
    auto loglik = [&](const VectorXd& cand) {
      MatrixXd cand_phi = Eigen::Map<const MatrixXd>(cand.data(), phi_.rows(), phi_.cols());
      const KernelParams params = make_kernel(ps_.fam, ps_.layout, nat_, cand_phi, ps_.rank_j);
      const PriorChol cand_chol = build_prior_chol(*ps_.panel, *ps_.eval, params, ps_.all_cells);
      return data_ll(cand_chol.apply_lower(nu_white));
    };
    auto [x_new, ll_new] = ess_move(rng_, x, cur_ll_, nu, loglik);
    if ((x_new - x).squaredNorm() > 0.0) {
      phi_ = Eigen::Map<const MatrixXd>(x_new.data(), phi_.rows(), phi_.cols());
      chol_ = build_prior_chol(*ps_.panel, *ps_.eval, current_kernel(), ps_.all_cells);
      state_.f = chol_.apply_lower(nu_white);
      cur_ll_ = ll_new;
    }
  }

  void update_f() {
    const VectorXd nu = chol_.sample(rng_);
    auto [f_new, ll_new] =
        ess_move(rng_, state_.f, cur_ll_, nu, [&](const VectorXd& f) { return data_ll(f); });
    state_.f = f_new;
    cur_ll_ = ll_new;
  }

  void update_mu0(bool adapting) {
    const double prop = state_.mu0 + mu0_scale_.scale() * rng_.normal();
    const Prior& prior = prior_for(ps_.priors, "mu0");
    LatentState s = state_;
    s.mu0 = prop;
    const double ll_prop = loglik_cells(*ps_.panel, s, {ps_.lik, 0.0}, ps_.part.obs);
    const double ratio =
        (ll_prop + log_pdf(prior, prop)) - (cur_ll_ + log_pdf(prior, state_.mu0));
    const double accept_prob = std::isfinite(ratio) ? std::min(1.0, std::exp(ratio)) : 0.0;
    if (std::log(1.0 - rng_.uniform()) < ratio) {
      state_.mu0 = prop;
      cur_ll_ = ll_prop;
    }
    mu0_scale_.learn(accept_prob, adapting);
  }

  void update_delta(bool adapting) {
    const Prior& prior = prior_for(ps_.priors, "delta");
    double acc_sum = 0.0;
    for (int i = 0; i < ps_.panel->n_units; ++i) {
      const double prop = state_.delta(i) + delta_scale_.scale() * rng_.normal();
      double ll_old = 0.0, ll_new = 0.0;
      LatentState s = state_;
      s.delta(i) = prop;
      for (int t = 0; t < ps_.panel->n_times; ++t) {
        if (ps_.panel->is_treated_cell(i, t)) continue;
        ll_old += loglik_cell(*ps_.panel, state_, {ps_.lik, 0.0}, i, t);
        ll_new += loglik_cell(*ps_.panel, s, {ps_.lik, 0.0}, i, t);
      }
      const double ratio =
          (ll_new + log_pdf(prior, prop)) - (ll_old + log_pdf(prior, state_.delta(i)));
      acc_sum += std::isfinite(ratio) ? std::min(1.0, std::exp(ratio)) : 0.0;
      if (std::log(1.0 - rng_.uniform()) < ratio) {
        state_.delta(i) = prop;
        cur_ll_ += ll_new - ll_old;
      }
    }
    delta_scale_.learn(acc_sum / ps_.panel->n_units, adapting);
  }

  void update_beta(bool adapting) {
    VectorXd prop = beta_block_.propose(state_.beta, rng_);
    const Prior& prior = prior_for(ps_.priors, "beta");
    LatentState s = state_;
    s.beta = prop;
    const double ll_prop = loglik_cells(*ps_.panel, s, {ps_.lik, 0.0}, ps_.part.obs);
    double lp_new = 0.0, lp_old = 0.0;
    for (int i = 0; i < prop.size(); ++i) {
      lp_new += log_pdf(prior, prop(i));
      lp_old += log_pdf(prior, state_.beta(i));
    }
    const double ratio = (ll_prop + lp_new) - (cur_ll_ + lp_old);
    const double accept_prob = std::isfinite(ratio) ? std::min(1.0, std::exp(ratio)) : 0.0;
    if (std::log(1.0 - rng_.uniform()) < ratio) {
      state_.beta = prop;
      cur_ll_ = ll_prop;
    }
    beta_block_.learn(state_.beta, accept_prob, adapting);
  }

  const ProblemSpec& ps_;
  Rng rng_;
  AdaptiveBlock hyper_block_;
  AdaptiveScalar mu0_scale_, delta_scale_;
  AdaptiveBlock beta_block_;
  VectorXd nat_;
  MatrixXd phi_;
  LatentState state_;
  PriorChol chol_;
  double cur_ll_ = 0.0;
};

inline ChainOutput run_chain(const ProblemSpec& ps, const SamplerConfig& config,
                             std::uint64_t seed) {
  const int kept = config.iters - config.burn_in;
  ChainOutput out;
  out.params = MatrixXd::Zero(kept, ps.param_names.size());
  out.cf = MatrixXd::Zero(kept, ps.part.mis.size());
  const bool latent = ps.lik != Likelihood::normal;
  if (latent && config.keep_latent)
    out.latent_f = MatrixXd::Zero(kept, ps.panel->n_cells());

  Eigen::RowVectorXd empty_row(0);
  if (latent) {
    LatentChain chain(ps, seed);
    for (int it = 0; it < config.iters; ++it) {
      chain.iterate(it < config.burn_in);
      if (it >= config.burn_in) {
        const int k = it - config.burn_in;
        if (out.latent_f.size() > 0)
          chain.record(RowRef(out.params.row(k)), RowRef(out.cf.row(k)),
                       RowRef(out.latent_f.row(k)));
        else
          chain.record(RowRef(out.params.row(k)), RowRef(out.cf.row(k)), RowRef(empty_row));
      }
    }
  } else {
    NormalChain chain(ps, seed);
    for (int it = 0; it < config.iters; ++it) {
      chain.iterate(it < config.burn_in);
      if (it >= config.burn_in) {
        const int k = it - config.burn_in;
        chain.record(RowRef(out.params.row(k)), RowRef(out.cf.row(k)));
      }
    }
  }
  return out;
}

}  // namespace detail

inline ChainSet run_mcmc(const PanelData& panel, const KernelParams& kernel_template,
                         Likelihood lik, const PriorSpec& priors, const SamplerConfig& config) {
  panel.validate();
  if (config.iters <= 0) throw std::invalid_argument("run_mcmc: iters must be positive");
  if (config.burn_in < 0 || config.burn_in >= config.iters)
    throw std::invalid_argument("run_mcmc: need 0 <= burn_in < iters");
  if (config.chains < 1) throw std::invalid_argument("run_mcmc: need at least one chain");
  if (lik == Likelihood::normal) {
    for (int i = 0; i < panel.n_units; ++i)
      for (int t = 0; t < panel.n_times; ++t)
        if (!std::isfinite(panel.y(i, t)))
          throw std::invalid_argument("run_mcmc: non-finite outcome");
  }

  KernelEvaluator eval(panel);
  detail::ProblemSpec ps;
  ps.panel = &panel;
  ps.eval = &eval;
  ps.part = partition(panel);
  for (int i = 0; i < panel.n_units; ++i)
    for (int t = 0; t < panel.n_times; ++t) ps.all_cells.push_back({i, t});
  ps.fam = family(kernel_template);
  ps.lik = lik;
  ps.priors = priors;
  ps.layout = detail::hyper_layout(ps.fam, lik);
  if (ps.fam == KernelFamily::icm_rbf) {
    const auto& icm = std::get<IcmRbfParams>(kernel_template);
    ps.rank_j = icm.rank_j;
    ps.learn_phi = icm.phi.size() == 0;
    if (!ps.learn_phi) ps.fixed_phi = icm.phi;
    if (ps.rank_j >= panel.n_units)
      throw std::invalid_argument("run_mcmc: ICM rank must be below the unit count");
  }
  ps.y_obs = gather_cells(panel.y, ps.part.obs);
  if (lik == Likelihood::normal) {
    ps.w_obs = design_matrix(panel, ps.part.obs, true);
    ps.w_mis = design_matrix(panel, ps.part.mis, true);
  }

  ps.param_names = ps.layout.names;
  if (lik == Likelihood::normal) {
    if (!panel.unit_fixed_effects) ps.param_names.push_back("mu0");
    const int extra = static_cast<int>(ps.w_obs.cols()) - (panel.unit_fixed_effects ? 0 : 1);
    for (int k = 0; k < extra; ++k) ps.param_names.push_back("beta[" + std::to_string(k) + "]");
  } else {
    ps.param_names.push_back("mu0");
    if (panel.unit_fixed_effects)
      for (int i = 0; i < panel.n_units; ++i)
        ps.param_names.push_back("delta[" + std::to_string(i) + "]");
    for (int k = 0; k < panel.covariates.cols(); ++k)
      ps.param_names.push_back("beta[" + std::to_string(k) + "]");
  }
  if (ps.learn_phi)
    for (int i = 0; i < panel.n_units; ++i)
      for (int j = 0; j < ps.rank_j; ++j)
        ps.param_names.push_back("phi[" + std::to_string(i) + "," + std::to_string(j) + "]");

  ChainSet set;
  set.param_names = ps.param_names;
  set.mis_cells = ps.part.mis;
  set.fam = ps.fam;
  set.lik = lik;
  set.config = config;
  set.n_units = panel.n_units;
  set.n_times = panel.n_times;
  set.rank_j = ps.rank_j;
  set.learned_phi = ps.learn_phi;
  set.fixed_phi = ps.fixed_phi;
  set.params.resize(config.chains);
  set.cf.resize(config.chains);
  set.latent_f.resize(config.chains);
  for (int c = 0; c < config.chains; ++c)
    set.chain_seeds.push_back(derive_seed(config.seed, {0xC4A11ull, static_cast<std::uint64_t>(c)}));

  auto run_one = [&](int c) {
    const auto out = detail::run_chain(ps, config, set.chain_seeds[c]);
    set.params[c] = out.params;
    set.cf[c] = out.cf;
    set.latent_f[c] = out.latent_f;
  };
  if (config.jobs > 1 && config.chains > 1) {
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(config.chains);
    const int workers = std::min(config.jobs, config.chains);
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (int c = next.fetch_add(1); c < config.chains; c = next.fetch_add(1)) {
          try {
            run_one(c);
          } catch (...) {
            errors[static_cast<std::size_t>(c)] = std::current_exception();
          }
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    for (int c = 0; c < config.chains; ++c) run_one(c);
  }
  return set;
}

inline FitReport fit_report(const ChainSet& set, double threshold) {
  FitReport report;
  report.threshold = threshold;
  for (const auto& name : set.param_names) {
    if (name.rfind("phi[", 0) == 0) continue;  // sign/rotation non-identifiable by design
    const double r = rhat(set.chains_of(name));
    report.rhat_by_param[name] = r;
    if (!(r < threshold)) {
      report.flagged.push_back(name);
      report.converged = false;
    }
  }
  double sum = 0.0, maxr = 0.0;
  for (std::size_t j = 0; j < set.mis_cells.size(); ++j) {
    std::vector<VectorXd> per_chain;
    for (const auto& m : set.cf) per_chain.push_back(m.col(static_cast<Eigen::Index>(j)));
    const double r = rhat(per_chain);
    sum += r;
    maxr = std::max(maxr, r);
  }
  report.avg_cf_rhat = set.mis_cells.empty() ? 1.0 : sum / static_cast<double>(set.mis_cells.size());
  report.max_cf_rhat = maxr;
  if (!(report.avg_cf_rhat < threshold)) {
    report.flagged.push_back("counterfactual_draws");
    report.converged = false;
  }
  return report;
}

inline MatrixXd posterior_block_predict(const PanelData& panel, const ChainSet& set,
                                        const std::vector<CellId>& targets,
                                        const std::vector<CellId>& conditioning, int thin) {
  if (thin < 1) throw std::invalid_argument("posterior_block_predict: thin must be >= 1");
  KernelEvaluator eval(panel);
  const auto layout = detail::hyper_layout(set.fam, set.lik);
  const int kept = set.kept();
  const int n_chains = static_cast<int>(set.params.size());
  std::vector<std::pair<int, int>> picks;  // (chain, kept index)
  for (int c = 0; c < n_chains; ++c)
    for (int k = 0; k < kept; k += thin) picks.push_back({c, k});
  MatrixXd draws(picks.size(), targets.size());

  MatrixXd w_cond, w_tgt;
  if (set.lik == Likelihood::normal) {
    w_cond = design_matrix(panel, conditioning, true);
    w_tgt = design_matrix(panel, targets, true);
  }
  const VectorXd y_cond = gather_cells(panel.y, conditioning);

  Rng rng(derive_seed(set.config.seed, {0xB10CCull}));
  for (std::size_t d = 0; d < picks.size(); ++d) {
    const auto [c, k] = picks[d];
    const Eigen::RowVectorXd row = set.params[c].row(k);

    VectorXd nat(layout.size());
    for (int i = 0; i < layout.size(); ++i) nat(i) = row(set.param_index(layout.names[i]));
    MatrixXd phi;
    if (set.fam == KernelFamily::icm_rbf) {
      if (set.learned_phi) {
        phi = MatrixXd(set.n_units, set.rank_j);
        for (int i = 0; i < set.n_units; ++i)
          for (int j = 0; j < set.rank_j; ++j)
            phi(i, j) =
                row(set.param_index("phi[" + std::to_string(i) + "," + std::to_string(j) + "]"));
      } else {
        phi = set.fixed_phi;
      }
    }
    const KernelParams params = detail::make_kernel(set.fam, layout, nat, phi, set.rank_j);

    if (set.lik == Likelihood::normal) {
      const double sigma2 = nat(layout.index("sigma2"));
      VectorXd coef(w_cond.cols());
      if (panel.unit_fixed_effects) {
        for (int i = 0; i < coef.size(); ++i)
          coef(i) = row(set.param_index("beta[" + std::to_string(i) + "]"));
      } else {
        coef(0) = row(set.param_index("mu0"));
        for (int i = 1; i < coef.size(); ++i)
          coef(i) = row(set.param_index("beta[" + std::to_string(i - 1) + "]"));
      }
      const VectorXd resid = y_cond - w_cond * coef;
      const MatrixXd k_cc = eval.cross(params, conditioning, conditioning);
      const MatrixXd k_tc = eval.cross(params, targets, conditioning);
      const MatrixXd k_tt = eval.cross(params, targets, targets);
      const NormalPosterior post = condition_normal(resid, k_cc, k_tc, k_tt, sigma2);
      MatrixXd cov = post.Sigma;
      cov.diagonal().array() += sigma2;  // data-scale draw
      draws.row(d) = (w_tgt * coef + mvn_sample(post.mu, cov, 1, rng).row(0).transpose()).transpose();
    } else {
      // Latent conditional f_targets | f_conditioning at the drawn kernel.
      if (set.latent_f[c].size() == 0)
        throw std::invalid_argument("posterior_block_predict: fit was run without keep_latent");
      const Eigen::RowVectorXd f_row = set.latent_f[c].row(k);
      VectorXd f_cond(conditioning.size());
      for (std::size_t i = 0; i < conditioning.size(); ++i)
        f_cond(i) = f_row(conditioning[i].unit * set.n_times + conditioning[i].time);
      const MatrixXd k_cc = eval.cross(params, conditioning, conditioning);
      const MatrixXd k_tc = eval.cross(params, targets, conditioning);
      const MatrixXd k_tt = eval.cross(params, targets, targets);
      const NormalPosterior post = condition_normal(f_cond, k_cc, k_tc, k_tt, 0.0);
      const VectorXd f_tgt = mvn_sample(post.mu, post.Sigma, 1, rng).row(0).transpose();
      const double mu0 = row(set.param_index("mu0"));
      for (std::size_t i = 0; i < targets.size(); ++i) {
        double m = mu0 + f_tgt(static_cast<Eigen::Index>(i));
        if (panel.unit_fixed_effects)
          m += row(set.param_index("delta[" + std::to_string(targets[i].unit) + "]"));
        for (int b = 0; b < panel.covariates.cols(); ++b)
          m += panel.covariates(panel.cell_index(targets[i].unit, targets[i].time), b) *
               row(set.param_index("beta[" + std::to_string(b) + "]"));
        if (set.lik == Likelihood::poisson) {
          draws(d, static_cast<Eigen::Index>(i)) = static_cast<double>(
              rng.poisson(std::exp(m) * panel.offset(targets[i].unit, targets[i].time)));
        } else {
          draws(d, static_cast<Eigen::Index>(i)) =
              rng.uniform() < 1.0 / (1.0 + std::exp(-m)) ? 1.0 : 0.0;
        }
      }
    }
  }
  return draws;
}

}  // namespace stgp
