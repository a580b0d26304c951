#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "stgp/causal.hpp"
#include "stgp/kernels.hpp"
#include "stgp/mcmc.hpp"
#include "stgp/panel.hpp"

namespace stgp {

// Data-generating process on an nx x ny grid of cell centers over [0,1]^2:
// f ~ MVN(0, K), then Normal outcomes mu0 + f + noise or Poisson outcomes
// with log mean mu0 (+ delta_i) + f (+ log offset). No treatment effect is
// injected; the generated outcome at a treated-post cell *is* the
// counterfactual truth the study evaluates against.
struct DgpSpec {
  std::string name;
  int nx = 7, ny = 7;
  int n_times = 15;
  int n_treated = 10;               // drawn seeded-uniform unless treated_units set
  std::vector<int> treated_units;
  int t_star = 8;                   // 1-based
  KernelParams kernel = RbfRbfParams{1.0, 0.3, 0.9};
  Likelihood lik = Likelihood::normal;
  double sigma2 = 0.05;             // Normal noise
  double mu0 = 4.0;
  std::uint64_t seed = 1;
  // extensions used by the Poisson pipeline design
  double delta_sd = 0.0;            // unit effects in the DGP (0 = none)
  bool offsets = false;             // per-unit exposure drawn U(offset_lo, offset_hi)
  double offset_lo = 5e3, offset_hi = 5e4;
};

struct SimTruth {
  PanelData panel;       // y holds the untreated outcome everywhere
  VectorXd f;            // latent field, unit-major
  VectorXd delta;        // unit effects (empty when delta_sd = 0)
  KernelParams kernel;   // with any drawn ICM factors filled in
};

inline SimTruth generate(const DgpSpec& spec) {
  if (spec.nx < 1 || spec.ny < 1 || spec.n_times < 1)
    throw std::invalid_argument("generate: empty grid");
  const int n = spec.nx * spec.ny;
  if (spec.t_star < 1 || spec.t_star > spec.n_times)
    throw std::invalid_argument("generate: t_star outside 1..T");

  SimTruth sim;
  PanelData& p = sim.panel;
  p.n_units = n;
  p.n_times = spec.n_times;
  p.t_star = spec.t_star;
  p.coords = MatrixXd::Zero(n, 2);
  for (int ix = 0; ix < spec.nx; ++ix)
    for (int iy = 0; iy < spec.ny; ++iy) {
      const int u = ix * spec.ny + iy;
      p.coords(u, 0) = (ix + 0.5) / spec.nx;
      p.coords(u, 1) = (iy + 0.5) / spec.ny;
    }
  p.time_values = VectorXd::LinSpaced(spec.n_times, 1.0, spec.n_times);
  for (int i = 0; i < n; ++i) p.unit_labels.push_back(std::to_string(i + 1));

  Rng rng(derive_seed(spec.seed, {0xD69ull}));

  // treated set
  p.treated.assign(n, 0);
  std::vector<int> treated = spec.treated_units;
  if (treated.empty()) {
    if (spec.n_treated < 1 || spec.n_treated >= n)
      throw std::invalid_argument("generate: treated count must be in 1..N-1");
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
    for (int k = 0; k < spec.n_treated; ++k) {
      const int j = k + static_cast<int>(rng.uniform() * (n - k));
      std::swap(pool[static_cast<std::size_t>(k)], pool[static_cast<std::size_t>(j)]);
      treated.push_back(pool[static_cast<std::size_t>(k)]);
    }
  }
  for (int u : treated) {
    if (u < 0 || u >= n) throw std::invalid_argument("generate: treated unit outside grid");
    p.treated[static_cast<std::size_t>(u)] = 1;
  }

  // kernel, with ICM factors drawn at scale sqrt(tau2 / J) so the unit
  // variance averages tau2
  sim.kernel = spec.kernel;
  if (family(sim.kernel) == KernelFamily::icm_rbf) {
    auto& icm = std::get<IcmRbfParams>(sim.kernel);
    if (icm.phi.size() == 0) {
      icm.phi = MatrixXd(n, icm.rank_j);
      const double scale = std::sqrt(icm.tau2 / icm.rank_j);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < icm.rank_j; ++j) icm.phi(i, j) = scale * rng.normal();
    }
  }
  validate(sim.kernel);

  // latent field
  KernelEvaluator eval(p);
  std::vector<CellId> all;
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < spec.n_times; ++t) all.push_back({i, t});
  const detail::PriorChol chol = detail::build_prior_chol(p, eval, sim.kernel, all);
  sim.f = chol.sample(rng);

  if (spec.delta_sd > 0.0) {
    sim.delta = VectorXd(n);
    for (int i = 0; i < n; ++i) sim.delta(i) = spec.delta_sd * rng.normal();
    p.unit_fixed_effects = true;
  }

  p.offset = MatrixXd::Ones(n, spec.n_times);
  if (spec.offsets) {
    for (int i = 0; i < n; ++i) {
      const double theta = rng.uniform(spec.offset_lo, spec.offset_hi);
      for (int t = 0; t < spec.n_times; ++t) p.offset(i, t) = theta;
    }
  }

  p.y = MatrixXd::Zero(n, spec.n_times);
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < spec.n_times; ++t) {
      double m = spec.mu0 + sim.f(p.cell_index(i, t));
      if (sim.delta.size() > 0) m += sim.delta(i);
      if (spec.lik == Likelihood::normal) {
        p.y(i, t) = m + std::sqrt(spec.sigma2) * rng.normal();
      } else if (spec.lik == Likelihood::poisson) {
        p.y(i, t) = static_cast<double>(rng.poisson(std::exp(m) * p.offset(i, t)));
      } else {
        p.y(i, t) = rng.uniform() < 1.0 / (1.0 + std::exp(-m)) ? 1.0 : 0.0;
      }
    }
  p.validate();
  return sim;
}

enum class BiasMode { per_cell, aggregate };

struct Metrics {
  double percent_bias = 0.0;
  double mse = 0.0;
  double coverage95 = 0.0;
  int zero_truth_excluded = 0;
};

// Per-replicate metrics against the retained counterfactual truth:
//  - percent bias: 100 * mean over cells of |posterior mean - truth|/|truth|
//    (cells with zero truth are excluded and counted), or the aggregate
//    alternative 100 * |sum(diff)| / sum|truth|;
//  - MSE of posterior means;
//  - coverage of equal-tailed 95% predictive intervals.
inline Metrics metrics(const VectorXd& truth, const CounterfactualDraws& cf,
                       BiasMode mode = BiasMode::per_cell) {
  if (truth.size() != cf.draws.cols())
    throw std::invalid_argument("metrics: truth/draw misalignment");
  Metrics out;
  const int n = static_cast<int>(truth.size());
  double bias_acc = 0.0, agg_num = 0.0, agg_den = 0.0;
  int bias_n = 0, covered = 0;
  for (int k = 0; k < n; ++k) {
    const double mean = cf.draws.col(k).mean();
    out.mse += (mean - truth(k)) * (mean - truth(k));
    const double lo = quantile(cf.draws.col(k), 0.025);
    const double hi = quantile(cf.draws.col(k), 0.975);
    if (truth(k) >= lo && truth(k) <= hi) ++covered;
    agg_num += mean - truth(k);
    agg_den += std::fabs(truth(k));
    if (truth(k) == 0.0) {
      ++out.zero_truth_excluded;
    } else {
      bias_acc += std::fabs(mean - truth(k)) / std::fabs(truth(k));
      ++bias_n;
    }
  }
  out.mse /= n;
  out.coverage95 = static_cast<double>(covered) / n;
  if (mode == BiasMode::per_cell) {
    out.percent_bias = bias_n > 0 ? 100.0 * bias_acc / bias_n
                                  : std::numeric_limits<double>::quiet_NaN();
  } else {
    out.percent_bias = agg_den > 0.0 ? 100.0 * std::fabs(agg_num) / agg_den
                                     : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

inline VectorXd truth_at(const SimTruth& sim, const std::vector<CellId>& cells) {
  return gather_cells(sim.panel.y, cells);
}

struct FitKernelSpec {
  std::string name;
  KernelParams kernel;  // template; ICM factors learned when phi empty
};

struct StudyConfig {
  std::vector<DgpSpec> dgps;
  std::vector<FitKernelSpec> fit_kernels;
  int replicates = 20;
  SamplerConfig sampler;
  std::uint64_t master_seed = 20250829;
  int jobs = 1;
  BiasMode bias_mode = BiasMode::per_cell;
  PriorSpec priors = simulation_priors();
};

struct StudyRow {
  std::string dgp, fit_kernel, likelihood;
  int replicate = 0;
  Metrics m;
  bool ok = false;
  std::string error;
};

struct StudyAggregate {
  std::string dgp, fit_kernel, likelihood;
  double percent_bias = 0.0, mse = 0.0, coverage95 = 0.0;
  int n_ok = 0, n_failed = 0;
};

struct StudyResult {
  std::vector<StudyRow> rows;
  std::vector<StudyAggregate> aggregates;

  const StudyAggregate& aggregate(const std::string& dgp, const std::string& fit) const {
    for (const auto& a : aggregates)
      if (a.dgp == dgp && a.fit_kernel == fit) return a;
    throw std::invalid_argument("StudyResult: no aggregate for " + dgp + "/" + fit);
  }
};

// Full crossing of DGP x fitted kernel x replicate. Seeds derive from
// (master seed, dgp, kernel, replicate) so any execution order or thread
// count reproduces the same rows; failures are recorded and excluded from
// aggregates, never silently dropped.
inline StudyResult run_study(const StudyConfig& config) {
  if (config.replicates < 1) throw std::invalid_argument("run_study: need replicates >= 1");
  if (config.dgps.empty() || config.fit_kernels.empty())
    throw std::invalid_argument("run_study: need at least one DGP and one fit kernel");

  struct Task {
    int dgp_idx, kernel_idx, rep;
  };
  std::vector<Task> tasks;
  for (int d = 0; d < static_cast<int>(config.dgps.size()); ++d)
    for (int k = 0; k < static_cast<int>(config.fit_kernels.size()); ++k)
      for (int r = 0; r < config.replicates; ++r) tasks.push_back({d, k, r});

  StudyResult result;
  result.rows.resize(tasks.size());

  auto run_task = [&](std::size_t idx) {
    const Task& task = tasks[idx];
    const DgpSpec& base = config.dgps[static_cast<std::size_t>(task.dgp_idx)];
    const FitKernelSpec& fit = config.fit_kernels[static_cast<std::size_t>(task.kernel_idx)];
    StudyRow row;
    row.dgp = base.name;
    row.fit_kernel = fit.name;
    row.likelihood = likelihood_name(base.lik);
    row.replicate = task.rep;
    try {
      DgpSpec spec = base;
      spec.seed = derive_seed(config.master_seed,
                              {0xD6Dull, static_cast<std::uint64_t>(task.dgp_idx),
                               static_cast<std::uint64_t>(task.rep)});
      const SimTruth sim = generate(spec);
      SamplerConfig sampler = config.sampler;
      sampler.seed = derive_seed(config.master_seed,
                                 {0xF17ull, static_cast<std::uint64_t>(task.dgp_idx),
                                  static_cast<std::uint64_t>(task.kernel_idx),
                                  static_cast<std::uint64_t>(task.rep)});
      sampler.jobs = 1;  // parallelism lives at the task level
      const ChainSet chains =
          run_mcmc(sim.panel, fit.kernel, base.lik, config.priors, sampler);
      const CounterfactualDraws cf = counterfactuals(chains);
      row.m = metrics(truth_at(sim, cf.cells), cf, config.bias_mode);
      row.ok = true;
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
    result.rows[idx] = std::move(row);
  };

  if (config.jobs > 1) {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const int workers = std::min<std::size_t>(config.jobs, tasks.size());
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < tasks.size(); i = next.fetch_add(1))
          run_task(i);
      });
    for (auto& th : pool) th.join();
  } else {
    for (std::size_t i = 0; i < tasks.size(); ++i) run_task(i);
  }

  for (const auto& dgp : config.dgps)
    for (const auto& fit : config.fit_kernels) {
      StudyAggregate agg;
      agg.dgp = dgp.name;
      agg.fit_kernel = fit.name;
      agg.likelihood = likelihood_name(dgp.lik);
      for (const auto& row : result.rows) {
        if (row.dgp != dgp.name || row.fit_kernel != fit.name) continue;
        if (!row.ok) {
          ++agg.n_failed;
          continue;
        }
        agg.percent_bias += row.m.percent_bias;
        agg.mse += row.m.mse;
        agg.coverage95 += row.m.coverage95;
        ++agg.n_ok;
      }
      if (agg.n_ok > 0) {
        agg.percent_bias /= agg.n_ok;
        agg.mse /= agg.n_ok;
        agg.coverage95 /= agg.n_ok;
      }
      result.aggregates.push_back(std::move(agg));
    }
  return result;
}

// --- presets ----------------------------------------------------------------

// Paper-scale simulation designs: 7x7 grid, 15 periods, 10 treated from
// period 8; ICM tau2 = 0.40, l_t = 0.90, J = 5; RBF-RBF tau2 = 1.00,
// l_s = 0.30, l_t = 0.90; Gneiting tau2 = 1.00, l_s = 0.125, l_t = 0.57
// (exponents alpha = gamma = 1, interaction eta = 0.5); intercept 4.
inline std::vector<DgpSpec> dgp_presets(const std::string& scale, Likelihood lik) {
  DgpSpec base;
  if (scale == "paper") {
    base.nx = base.ny = 7;
    base.n_times = 15;
    base.n_treated = 10;
    base.t_star = 8;
  } else if (scale == "desk") {
    base.nx = base.ny = 5;
    base.n_times = 12;
    base.n_treated = 5;
    base.t_star = 8;
  } else {
    throw std::invalid_argument("dgp_presets: unknown scale '" + scale + "'");
  }
  base.lik = lik;
  base.mu0 = 4.0;
  base.sigma2 = 0.05;

  DgpSpec icm = base;
  icm.name = "icm_rbf";
  {
    IcmRbfParams p;
    p.tau2 = 0.40;
    p.l_t = 0.90;
    p.rank_j = 5;
    icm.kernel = p;
  }
  DgpSpec rbf = base;
  rbf.name = "rbf_rbf";
  rbf.kernel = RbfRbfParams{1.0, 0.30, 0.90};
  DgpSpec gneit = base;
  gneit.name = "gneiting";
  gneit.kernel = GneitingParams{1.0, 0.125, 0.57, 1.0, 1.0, 0.5};
  return {icm, rbf, gneit};
}

// Donor-weight illustration design: 4 treated units, treated periods 9..15.
inline DgpSpec illustration_preset() {
  DgpSpec spec;
  spec.name = "illustration";
  spec.nx = spec.ny = 7;
  spec.n_times = 15;
  spec.n_treated = 4;
  spec.t_star = 9;
  spec.kernel = RbfRbfParams{1.0, 0.9, 0.9};
  return spec;
}

// End-to-end Poisson pipeline design: counts with unit exposures and unit
// effects, nine pre-treatment periods and one treated period.
inline DgpSpec pipeline_preset() {
  DgpSpec spec;
  spec.name = "pipeline";
  spec.nx = spec.ny = 6;
  spec.n_times = 10;
  spec.n_treated = 5;
  spec.t_star = 10;
  spec.kernel = GneitingParams{0.4, 0.125, 0.57, 1.0, 1.0, 0.5};
  spec.lik = Likelihood::poisson;
  spec.mu0 = -6.5;
  spec.delta_sd = 0.3;
  spec.offsets = true;
  return spec;
}

inline std::vector<FitKernelSpec> default_fit_kernels(int icm_rank = 5) {
  IcmRbfParams icm;
  icm.rank_j = icm_rank;
  return {{"icm_rbf", icm}, {"rbf_rbf", RbfRbfParams{}}, {"gneiting", GneitingParams{}}};
}

}  // namespace stgp
