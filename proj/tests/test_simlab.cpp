#include <catch_amalgamated.hpp>
#include <cmath>

#include "stgp/simlab.hpp"

using namespace stgp;

TEST_CASE("identical seeds generate identical panels bit-for-bit") {
  for (auto lik : {Likelihood::normal, Likelihood::poisson}) {
    DgpSpec spec = dgp_presets("desk", lik)[1];
    spec.seed = 777;
    const auto a = generate(spec);
    const auto b = generate(spec);
    CHECK(a.panel.y == b.panel.y);
    CHECK(a.f == b.f);
    CHECK(a.panel.treated == b.panel.treated);
    DgpSpec other = spec;
    other.seed = 778;
    CHECK(generate(other).panel.y != a.panel.y);
  }
}

TEST_CASE("paper-scale presets carry the published parameters") {
  const auto presets = dgp_presets("paper", Likelihood::normal);
  REQUIRE(presets.size() == 3);
  CHECK(presets[0].nx * presets[0].ny == 49);
  CHECK(presets[0].n_times == 15);
  CHECK(presets[0].n_treated == 10);
  CHECK(presets[0].t_star == 8);
  const auto& icm = std::get<IcmRbfParams>(presets[0].kernel);
  CHECK(icm.tau2 == 0.40);
  CHECK(icm.l_t == 0.90);
  CHECK(icm.rank_j == 5);
  CHECK(presets[0].mu0 == 4.0);
  const auto& rbf = std::get<RbfRbfParams>(presets[1].kernel);
  CHECK(rbf.tau2 == 1.0);
  CHECK(rbf.l_s == 0.30);
  CHECK(rbf.l_t == 0.90);
  const auto& g = std::get<GneitingParams>(presets[2].kernel);
  CHECK(g.tau2 == 1.0);
  CHECK(g.l_s == 0.125);
  CHECK(g.l_t == 0.57);

  const auto desk = dgp_presets("desk", Likelihood::poisson);
  CHECK(desk[0].nx * desk[0].ny == 25);
  CHECK(desk[0].n_times == 12);
  CHECK(desk[0].lik == Likelihood::poisson);
}

TEST_CASE("generated ICM factors give the right marginal variance scale") {
  DgpSpec spec = dgp_presets("paper", Likelihood::normal)[0];
  spec.seed = 123;
  const auto sim = generate(spec);
  const auto& icm = std::get<IcmRbfParams>(sim.kernel);
  REQUIRE(icm.phi.rows() == 49);
  REQUIRE(icm.phi.cols() == 5);
  // E[sum_j phi_ij^2] = tau2; the average diagonal should be near 0.40
  const double avg_diag = (icm.phi * icm.phi.transpose()).diagonal().mean();
  CHECK(avg_diag == Catch::Approx(0.40).margin(0.15));
}

TEST_CASE("Poisson outcomes follow the exponentiated latent mean") {
  DgpSpec spec;
  spec.nx = spec.ny = 3;
  spec.n_times = 4;
  spec.n_treated = 2;
  spec.t_star = 3;
  spec.lik = Likelihood::poisson;
  spec.mu0 = 2.0;
  spec.seed = 55;
  const auto sim = generate(spec);
  // at fixed f, repeated draws of Y average to exp(mu0 + f) within 3 SE
  Rng rng(56);
  const int reps = 3000;
  for (int cell : {0, 5, 11}) {
    const int i = cell / spec.n_times, t = cell % spec.n_times;
    const double rate = std::exp(spec.mu0 + sim.f(cell)) * sim.panel.offset(i, t);
    double acc = 0.0;
    for (int r = 0; r < reps; ++r) acc += static_cast<double>(rng.poisson(rate));
    const double mean = acc / reps;
    CHECK(std::fabs(mean - rate) < 3.0 * std::sqrt(rate / reps));
  }
  CHECK((sim.panel.y.array() >= 0.0).all());
  CHECK((sim.panel.y.array() == sim.panel.y.array().floor()).all());
}

TEST_CASE("pipeline preset produces offsets and unit effects") {
  DgpSpec spec = pipeline_preset();
  spec.seed = 77;
  const auto sim = generate(spec);
  CHECK(sim.panel.unit_fixed_effects);
  CHECK(sim.delta.size() == sim.panel.n_units);
  CHECK(sim.panel.offset.minCoeff() >= spec.offset_lo);
  CHECK(sim.panel.offset.maxCoeff() <= spec.offset_hi);
  CHECK(sim.panel.t_star == 10);
  CHECK(sim.panel.t0() == 9);
}

TEST_CASE("metrics definitions") {
  CounterfactualDraws cf;
  cf.cells = {{0, 0}, {1, 0}};

  SECTION("exact predictions give zero bias and MSE") {
    VectorXd truth(2);
    truth << 3.0, 7.0;
    cf.draws = MatrixXd(4, 2);
    cf.draws << 3, 7, 3, 7, 3, 7, 3, 7;
    const Metrics m = metrics(truth, cf);
    CHECK(m.percent_bias == 0.0);
    CHECK(m.mse == 0.0);
    CHECK(m.coverage95 == 1.0);
  }

  SECTION("worked single-cell example: truth 10, posterior mean 11") {
    VectorXd truth(1);
    truth << 10.0;
    CounterfactualDraws one;
    one.cells = {{0, 0}};
    one.draws = MatrixXd(2, 1);
    one.draws << 10.5, 11.5;  // mean 11
    const Metrics m = metrics(truth, one);
    CHECK(m.percent_bias == Catch::Approx(10.0).epsilon(1e-12));
    CHECK(m.mse == Catch::Approx(1.0).epsilon(1e-12));
  }

  SECTION("zero-truth cells are excluded from percent bias and counted") {
    VectorXd truth(2);
    truth << 0.0, 5.0;
    cf.draws = MatrixXd(2, 2);
    cf.draws << 1.0, 6.0, 1.0, 6.0;
    const Metrics m = metrics(truth, cf);
    CHECK(m.zero_truth_excluded == 1);
    CHECK(m.percent_bias == Catch::Approx(20.0).epsilon(1e-12));
  }

  SECTION("aggregate-bias alternative") {
    VectorXd truth(2);
    truth << 10.0, 10.0;
    cf.draws = MatrixXd(1, 2);
    cf.draws << 12.0, 9.0;  // sum diff = +1, sum |truth| = 20
    const Metrics m = metrics(truth, cf, BiasMode::aggregate);
    CHECK(m.percent_bias == Catch::Approx(5.0).epsilon(1e-12));
  }

  SECTION("matches an independent scalar loop on a random replicate") {
    Rng rng(88);
    const int n = 12, m_draws = 40;
    VectorXd truth(n);
    CounterfactualDraws big;
    big.draws = MatrixXd(m_draws, n);
    for (int k = 0; k < n; ++k) {
      truth(k) = rng.normal(5.0, 2.0);
      big.cells.push_back({k, 0});
      for (int d = 0; d < m_draws; ++d) big.draws(d, k) = rng.normal(5.0, 2.0);
    }
    const Metrics m = metrics(truth, big);

    double bias = 0.0, mse = 0.0;
    int covered = 0;
    for (int k = 0; k < n; ++k) {
      double mean = 0.0;
      std::vector<double> col;
      for (int d = 0; d < m_draws; ++d) {
        mean += big.draws(d, k);
        col.push_back(big.draws(d, k));
      }
      mean /= m_draws;
      bias += std::fabs(mean - truth(k)) / std::fabs(truth(k));
      mse += (mean - truth(k)) * (mean - truth(k));
      std::sort(col.begin(), col.end());
      const double lo = quantile(col, 0.025), hi = quantile(col, 0.975);
      if (truth(k) >= lo && truth(k) <= hi) ++covered;
    }
    CHECK(m.percent_bias == Catch::Approx(100.0 * bias / n).margin(1e-12));
    CHECK(m.mse == Catch::Approx(mse / n).margin(1e-12));
    CHECK(m.coverage95 == Catch::Approx(covered / static_cast<double>(n)).margin(1e-12));
  }
}

TEST_CASE("a tiny study crossing runs deterministically and aggregates") {
  StudyConfig config;
  config.dgps = dgp_presets("desk", Likelihood::normal);
  config.dgps.resize(2);
  for (auto& d : config.dgps) {
    d.nx = d.ny = 3;
    d.n_times = 5;
    d.n_treated = 2;
    d.t_star = 4;
  }
  config.fit_kernels = default_fit_kernels(3);
  config.fit_kernels.resize(2);
  config.replicates = 2;
  config.sampler.chains = 2;
  config.sampler.iters = 60;
  config.sampler.burn_in = 30;
  config.master_seed = 4242;
  config.jobs = 1;

  const StudyResult serial = run_study(config);
  CHECK(serial.rows.size() == 2 * 2 * 2);
  for (const auto& row : serial.rows) {
    INFO(row.dgp << "/" << row.fit_kernel << " rep " << row.replicate << ": " << row.error);
    CHECK(row.ok);
    CHECK(row.m.coverage95 >= 0.0);
    CHECK(row.m.coverage95 <= 1.0);
  }
  CHECK(serial.aggregates.size() == 4);
  CHECK(serial.aggregate(config.dgps[0].name, "rbf_rbf").n_ok == 2);

  StudyConfig threaded = config;
  threaded.jobs = 2;
  const StudyResult parallel = run_study(threaded);
  for (std::size_t i = 0; i < serial.rows.size(); ++i) {
    CHECK(serial.rows[i].ok == parallel.rows[i].ok);
    CHECK(serial.rows[i].m.mse == parallel.rows[i].m.mse);
    CHECK(serial.rows[i].m.percent_bias == parallel.rows[i].m.percent_bias);
  }
}
