#include <catch_amalgamated.hpp>

#include "stgp/linalg.hpp"

using namespace stgp;

namespace {

MatrixXd random_spd(int n, Rng& rng, double ridge = 0.5) {
  MatrixXd a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = rng.normal();
  return a * a.transpose() / n + ridge * MatrixXd::Identity(n, n);
}

}  // namespace

TEST_CASE("chol_jitter factors an SPD matrix without extra jitter") {
  Rng rng(1);
  const MatrixXd a = random_spd(8, rng);
  const auto f = chol_jitter(a, 0.1);
  CHECK(f.jitter == 0.0);
  VectorXd b = VectorXd::LinSpaced(8, -1.0, 1.0);
  MatrixXd shifted = a;
  shifted.diagonal().array() += 0.1;
  CHECK((shifted * f.llt.solve(b) - b).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("chol_jitter climbs the ladder for a singular matrix") {
  MatrixXd a = MatrixXd::Zero(4, 4);
  a(0, 0) = 1.0;  // rank 1
  const auto f = chol_jitter(a);
  CHECK(f.jitter >= kJitterBase);
  CHECK(f.jitter <= 1e-6);
}

TEST_CASE("chol_jitter reports the smallest eigenvalue on failure") {
  MatrixXd a = -MatrixXd::Identity(3, 3);
  try {
    chol_jitter(a);
    FAIL("expected failure");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("smallest eigenvalue") != std::string::npos);
  }
}

TEST_CASE("kron matches the definition entrywise") {
  MatrixXd a(2, 2), b(2, 3);
  a << 1, 2, 3, 4;
  b << 5, 6, 7, 8, 9, 10;
  const MatrixXd k = kron(a, b);
  REQUIRE(k.rows() == 4);
  REQUIRE(k.cols() == 6);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j)
      CHECK(k(i, j) == a(i / 2, j / 3) * b(i % 2, j % 3));
}

TEST_CASE("KroneckerSolver inverts the dense system") {
  Rng rng(2);
  const int n = 6, t = 5;
  const MatrixXd ku = random_spd(n, rng);
  const MatrixXd kt = random_spd(t, rng);
  const double s2 = 0.3;
  KroneckerSolver solver(ku, kt, s2);
  MatrixXd dense = kron(ku, kt);
  dense.diagonal().array() += s2;

  VectorXd v(n * t);
  for (int i = 0; i < n * t; ++i) v(i) = rng.normal();
  const VectorXd x = solver.apply(v);
  CHECK((dense * x - v).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(solver.logdet() == Catch::Approx(std::log(dense.determinant())).epsilon(1e-8));
}

TEST_CASE("mvn_sample handles singular covariance and matches moments") {
  Rng rng(3);
  VectorXd mu(2);
  mu << 1.0, -2.0;

  SECTION("zero covariance returns the mean exactly") {
    const MatrixXd draws = mvn_sample(mu, MatrixXd::Zero(2, 2), 50, rng);
    for (int d = 0; d < draws.rows(); ++d) {
      CHECK(draws(d, 0) == 1.0);
      CHECK(draws(d, 1) == -2.0);
    }
  }

  SECTION("sample covariance approaches the target") {
    MatrixXd sigma(2, 2);
    sigma << 2.0, 0.8, 0.8, 1.0;
    const int n = 100000;
    const MatrixXd draws = mvn_sample(mu, sigma, n, rng);
    const Eigen::RowVectorXd mean = draws.colwise().mean();
    const MatrixXd centered = draws.rowwise() - mean;
    const MatrixXd cov = centered.transpose() * centered / (n - 1);
    CHECK((cov - sigma).cwiseAbs().maxCoeff() < 0.05);
    CHECK(std::fabs(mean(0) - 1.0) < 0.05);
  }
}
