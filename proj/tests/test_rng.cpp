#include <catch_amalgamated.hpp>
#include <cmath>

#include "stgp/rng.hpp"

using namespace stgp;

TEST_CASE("derive_seed is deterministic and salt-sensitive") {
  CHECK(derive_seed(42, {1, 2, 3}) == derive_seed(42, {1, 2, 3}));
  CHECK(derive_seed(42, {1, 2, 3}) != derive_seed(42, {1, 2, 4}));
  CHECK(derive_seed(42, {1, 2, 3}) != derive_seed(43, {1, 2, 3}));
}

TEST_CASE("normal_quantile matches reference points") {
  CHECK(normal_quantile(0.5) == Catch::Approx(0.0).margin(1e-15));
  CHECK(normal_quantile(0.975) == Catch::Approx(1.959963984540054).epsilon(1e-12));
  CHECK(normal_quantile(0.025) == Catch::Approx(-1.959963984540054).epsilon(1e-12));
  CHECK(normal_quantile(0.8413447460685429) == Catch::Approx(1.0).epsilon(1e-10));
  CHECK(normal_cdf(normal_quantile(1e-6)) == Catch::Approx(1e-6).epsilon(1e-9));
}

TEST_CASE("same seed gives identical streams") {
  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) {
    CHECK(a.uniform() == b.uniform());
    CHECK(a.normal() == b.normal());
  }
}

TEST_CASE("normal draws have the right first two moments") {
  Rng rng(11);
  const int n = 200000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sum2 += x * x;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  CHECK(std::fabs(mean) < 4.0 / std::sqrt(static_cast<double>(n)));
  CHECK(var == Catch::Approx(1.0).margin(0.02));
}

TEST_CASE("poisson draws match mean and variance across regimes") {
  Rng rng(13);
  for (double lambda : {0.5, 4.0, 25.0, 120.0}) {
    const int n = 100000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const double x = static_cast<double>(rng.poisson(lambda));
      sum += x;
      sum2 += x * x;
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    const double se = std::sqrt(lambda / n);
    INFO("lambda = " << lambda);
    CHECK(std::fabs(mean - lambda) < 5.0 * se);
    CHECK(var == Catch::Approx(lambda).epsilon(0.05));
  }
}

TEST_CASE("gamma and inverse-gamma moments") {
  Rng rng(17);
  const int n = 200000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += rng.gamma(5.0, 5.0);
  CHECK(sum / n == Catch::Approx(1.0).margin(0.01));  // mean shape/rate
  sum = 0.0;
  for (int i = 0; i < n; ++i) sum += rng.inv_gamma(5.0, 5.0);
  CHECK(sum / n == Catch::Approx(5.0 / 4.0).margin(0.02));  // b/(a-1)
}

TEST_CASE("truncated normal stays in bounds") {
  Rng rng(19);
  for (int i = 0; i < 10000; ++i) {
    const double x = rng.trunc_normal(0.5, 0.1, 0.0, 1.0);
    REQUIRE(x >= 0.0);
    REQUIRE(x <= 1.0);
  }
  for (int i = 0; i < 10000; ++i) REQUIRE(rng.trunc_normal(0.0, 1.0, 0.0, 1e300) >= 0.0);
}
