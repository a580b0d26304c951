#include <catch_amalgamated.hpp>
#include <cmath>

#include "stgp/gp.hpp"
#include "stgp/kernels.hpp"
#include "test_util.hpp"

using namespace stgp;

namespace {

// Independent oracle: builds the display formula with an explicit matrix
// inverse (LU-based), no shared code with condition_normal's solve path.
struct OracleResult {
  VectorXd mu;
  MatrixXd sigma;
};

OracleResult mvn_conditional_oracle(const VectorXd& y_obs, const MatrixXd& k_obs,
                                    const MatrixXd& k_mis_obs, const MatrixXd& k_mis,
                                    double sigma2) {
  MatrixXd a = k_obs;
  a.diagonal().array() += sigma2;
  const MatrixXd a_inv = a.inverse();
  return {k_mis_obs * a_inv * y_obs, k_mis - k_mis_obs * a_inv * k_mis_obs.transpose()};
}

// Random PSD joint covariance split into obs/mis blocks.
struct JointBlocks {
  MatrixXd k_obs, k_mis_obs, k_mis;
  VectorXd y_obs;
};

JointBlocks random_blocks(int n_obs, int n_mis, Rng& rng) {
  const int n = n_obs + n_mis;
  MatrixXd root(n, n + 2);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n + 2; ++j) root(i, j) = rng.normal();
  MatrixXd joint = root * root.transpose() / n;
  JointBlocks b;
  b.k_obs = joint.topLeftCorner(n_obs, n_obs);
  b.k_mis = joint.bottomRightCorner(n_mis, n_mis);
  b.k_mis_obs = joint.bottomLeftCorner(n_mis, n_obs);
  b.y_obs = VectorXd(n_obs);
  for (int i = 0; i < n_obs; ++i) b.y_obs(i) = rng.normal(1.0, 2.0);
  return b;
}

}  // namespace

TEST_CASE("perfectly correlated cells transfer the observation") {
  MatrixXd one = MatrixXd::Ones(1, 1);
  VectorXd y(1);
  y << 2.0;
  const auto post = condition_normal(y, one, one, one, 0.0);
  CHECK(post.mu(0) == Catch::Approx(2.0).margin(1e-6));
  CHECK(std::fabs(post.Sigma(0, 0)) < 1e-6);
}

TEST_CASE("zero cross-covariance returns the prior") {
  Rng rng(7);
  auto b = random_blocks(4, 2, rng);
  b.k_mis_obs.setZero();
  const auto post = condition_normal(b.y_obs, b.k_obs, b.k_mis_obs, b.k_mis, 0.1);
  CHECK(post.mu.cwiseAbs().maxCoeff() == 0.0);
  CHECK((post.Sigma - b.k_mis).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("conditioning matches the explicit-inverse oracle") {
  Rng rng(11);
  SECTION("6-cell panel, 4 obs / 2 mis") {
    const auto b = random_blocks(4, 2, rng);
    const auto post = condition_normal(b.y_obs, b.k_obs, b.k_mis_obs, b.k_mis, 0.25);
    const auto oracle = mvn_conditional_oracle(b.y_obs, b.k_obs, b.k_mis_obs, b.k_mis, 0.25);
    CHECK((post.mu - oracle.mu).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((post.Sigma - oracle.sigma).cwiseAbs().maxCoeff() < 1e-10);
  }
  SECTION("20 random panels up to 12 cells") {
    for (int trial = 0; trial < 20; ++trial) {
      const int n_mis = 1 + static_cast<int>(rng.uniform() * 4);
      const int n_obs = 2 + static_cast<int>(rng.uniform() * (11 - n_mis));
      const double s2 = rng.uniform(0.01, 1.0);
      const auto b = random_blocks(n_obs, n_mis, rng);
      const auto post = condition_normal(b.y_obs, b.k_obs, b.k_mis_obs, b.k_mis, s2);
      const auto oracle = mvn_conditional_oracle(b.y_obs, b.k_obs, b.k_mis_obs, b.k_mis, s2);
      CHECK((post.mu - oracle.mu).cwiseAbs().maxCoeff() < 1e-10);
      CHECK((post.Sigma - oracle.sigma).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("posterior variance never exceeds the prior variance") {
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const auto b = random_blocks(6, 3, rng);
    const auto post = condition_normal(b.y_obs, b.k_obs, b.k_mis_obs, b.k_mis, 0.1);
    for (int i = 0; i < 3; ++i) CHECK(post.Sigma(i, i) <= b.k_mis(i, i) + 1e-10);
  }
}

TEST_CASE("predictive sampling") {
  Rng rng(17);
  const auto b = random_blocks(4, 2, rng);
  const auto post = condition_normal(b.y_obs, b.k_obs, b.k_mis_obs, b.k_mis, 0.25);

  SECTION("degenerate covariance draws collapse to the mean") {
    NormalPosterior point = post;
    point.Sigma.setZero();
    const MatrixXd draws = sample_predictive(point, 20, 42);
    for (int d = 0; d < 20; ++d)
      for (int j = 0; j < 2; ++j) CHECK(draws(d, j) == post.mu(j));
  }

  SECTION("sample mean obeys the CLT envelope") {
    const int m = 10000;
    const MatrixXd draws = sample_predictive(post, m, 42);
    for (int j = 0; j < 2; ++j) {
      const double mean = draws.col(j).mean();
      const double bound = 3.0 * std::sqrt(post.Sigma(j, j) / m);
      CHECK(std::fabs(mean - post.mu(j)) < bound);
    }
  }

  SECTION("same seed, same draws") {
    const MatrixXd a = sample_predictive(post, 50, 99);
    const MatrixXd c = sample_predictive(post, 50, 99);
    CHECK(a == c);
  }
}

TEST_CASE("log likelihood values and oracle") {
  auto panel = testutil::grid_panel(3, 2, 4, {0}, 3, 123);
  LatentState state;
  state.f = VectorXd::Zero(panel.n_cells());
  state.mu0 = 0.0;

  SECTION("Poisson at y=0, rate 1 contributes -1") {
    panel.y.setZero();
    CHECK(loglik_cells(panel, state, {Likelihood::poisson, 0.0}, {{0, 0}}) ==
          Catch::Approx(-1.0).epsilon(1e-15));
  }

  SECTION("Normal at the mean with unit variance contributes -log(2 pi)/2") {
    panel.y.setConstant(0.7);
    state.mu0 = 0.7;
    CHECK(loglik_cells(panel, state, {Likelihood::normal, 1.0}, {{1, 2}}) ==
          Catch::Approx(-0.9189385332046727).epsilon(1e-15));
  }

  SECTION("full panel equals a naive scalar loop") {
    Rng rng(23);
    panel.y = panel.y.array().abs().floor();  // valid Poisson outcomes
    panel.offset.setConstant(2.5);
    state.mu0 = 0.4;
    state.f = VectorXd::NullaryExpr(panel.n_cells(), [&](Eigen::Index) { return rng.normal(); });
    state.delta = VectorXd::NullaryExpr(panel.n_units, [&](Eigen::Index) { return 0.1 * rng.normal(); });

    double naive = 0.0;
    for (int i = 0; i < panel.n_units; ++i)
      for (int t = 0; t < panel.n_times; ++t) {
        const double lambda =
            std::exp(state.mu0 + state.delta(i) + state.f(panel.cell_index(i, t))) *
            panel.offset(i, t);
        naive += panel.y(i, t) * std::log(lambda) - lambda - std::lgamma(panel.y(i, t) + 1.0);
      }
    CHECK(loglik(panel, state, {Likelihood::poisson, 0.0}) == Catch::Approx(naive).margin(1e-10));

    double naive_n = 0.0;
    const double s2 = 0.8;
    for (int i = 0; i < panel.n_units; ++i)
      for (int t = 0; t < panel.n_times; ++t) {
        const double r = panel.y(i, t) - (state.mu0 + state.delta(i) + state.f(panel.cell_index(i, t)));
        naive_n += -0.5 * (r * r / s2 + std::log(2.0 * M_PI * s2));
      }
    CHECK(loglik(panel, state, {Likelihood::normal, s2}) == Catch::Approx(naive_n).margin(1e-10));
  }

  SECTION("doubling offsets doubles the Poisson mean exactly") {
    state.mu0 = 0.3;
    const double m = cell_linear_predictor(panel, state, 1, 1);
    const double rate1 = std::exp(m) * panel.offset(1, 1);
    panel.offset *= 2.0;
    const double rate2 = std::exp(m) * panel.offset(1, 1);
    CHECK(rate2 == 2.0 * rate1);
  }

  SECTION("invalid outcomes are rejected") {
    panel.y.setConstant(1.5);
    CHECK_THROWS_AS(loglik(panel, state, {Likelihood::poisson, 0.0}), std::invalid_argument);
    CHECK_THROWS_AS(loglik(panel, state, {Likelihood::bernoulli, 0.0}), std::invalid_argument);
    panel.y.setConstant(-2.0);
    CHECK_THROWS_AS(loglik(panel, state, {Likelihood::poisson, 0.0}), std::invalid_argument);
  }
}

TEST_CASE("Bernoulli log likelihood matches the closed form") {
  auto panel = testutil::grid_panel(2, 2, 2, {0}, 2);
  panel.y.setZero();
  panel.y(1, 1) = 1.0;
  LatentState state;
  state.f = VectorXd::Zero(panel.n_cells());
  state.mu0 = 0.3;
  const double p = 1.0 / (1.0 + std::exp(-0.3));
  const double expected = 7.0 * std::log(1.0 - p) + std::log(p);
  CHECK(loglik(panel, state, {Likelihood::bernoulli, 0.0}) ==
        Catch::Approx(expected).epsilon(1e-12));
}
