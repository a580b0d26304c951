#include <catch_amalgamated.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "stgp/io.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(STGP_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

json load(const std::string& path) { return json::parse(slurp(path)); }

const char* kTinySampler = "'{\"chains\":2,\"iters\":80,\"burn_in\":40,\"seed\":7}'";

}  // namespace

TEST_CASE("simulate reruns with one seed are byte-identical") {
  const auto dir = stgp::testutil::temp_dir("cli_sim");
  REQUIRE(run_cli("simulate --preset desk-normal --seed 11 --out " + dir + "/a") == 0);
  REQUIRE(run_cli("simulate --preset desk-normal --seed 11 --out " + dir + "/b") == 0);
  for (const char* dgp : {"icm_rbf", "rbf_rbf", "gneiting"}) {
    const std::string rel = std::string(dgp) + "/panel.csv";
    CHECK(slurp(dir + "/a/" + rel) == slurp(dir + "/b/" + rel));
    CHECK(slurp(dir + "/a/" + dgp + "/truth.csv") == slurp(dir + "/b/" + dgp + "/truth.csv"));
  }
  CHECK(slurp(dir + "/a/manifest.json") == slurp(dir + "/b/manifest.json"));
  REQUIRE(run_cli("simulate --preset desk-normal --seed 12 --out " + dir + "/c") == 0);
  CHECK(slurp(dir + "/a/gneiting/panel.csv") != slurp(dir + "/c/gneiting/panel.csv"));
}

TEST_CASE("invalid inputs exit with the validation code") {
  const auto dir = stgp::testutil::temp_dir("cli_bad");
  REQUIRE(run_cli("simulate --preset desk-normal --seed 3 --out " + dir) == 0);
  // unknown kernel name
  CHECK(run_cli("fit --panel " + dir + "/rbf_rbf/panel.csv --kernel '{\"kernel\":\"matern\"}' "
                "--out " + dir + "/f") == 2);
  // missing required flag
  CHECK(run_cli("fit --panel " + dir + "/rbf_rbf/panel.csv --out " + dir + "/f") != 0);
  // unknown preset
  CHECK(run_cli("simulate --preset nope --out " + dir + "/x") == 2);
}

TEST_CASE("pipeline: simulate, fit, att, weights, diagnose compose on files alone") {
  const auto dir = stgp::testutil::temp_dir("cli_pipe");
  REQUIRE(run_cli("simulate --preset pipeline --seed 42 --out " + dir + "/sim") == 0);
  REQUIRE(run_cli("fit --panel " + dir + "/sim/panel.csv --kernel '{\"kernel\":\"gneiting\"}' "
                  "--likelihood poisson --sampler " + std::string(kTinySampler) +
                  " --fixed-effects --jobs 2 --out " + dir + "/fit") == 0);
  REQUIRE(run_cli("att --fit " + dir + "/fit --rate-scale --pre-thin 8 --out " + dir + "/att") == 0);
  REQUIRE(run_cli("diagnose --fit " + dir + "/fit --out " + dir + "/diag") == 0);

  SECTION("fit artifacts and R-hat report") {
    for (const char* f : {"chains.csv", "cf_draws.csv", "f_draws.csv", "fit.json", "rhat.json",
                          "manifest.json"})
      CHECK(fs::exists(dir + "/fit/" + f));
    const json rhat = load(dir + "/fit/rhat.json");
    CHECK(rhat.contains("avg_cf_rhat"));
    CHECK(rhat.contains("by_param"));
    CHECK(rhat.at("threshold") == 1.05);
  }

  SECTION("ATT JSON carries overall and per-time blocks, rate-scaled") {
    const json att = load(dir + "/att/att.json");
    CHECK(att.at("rate_scale") == true);
    CHECK(att.at("att").contains("median"));
    CHECK(att.at("att").contains("lo"));
    CHECK(att.at("att").contains("hi"));
    CHECK(att.at("att").at("lo").get<double>() <= att.at("att").at("median").get<double>());
    CHECK(att.at("att_by_time").size() == 10);
    int pre = 0, post = 0;
    for (const auto& row : att.at("att_by_time"))
      (row.at("phase") == "pre" ? pre : post) += 1;
    CHECK(pre == 9);
    CHECK(post == 1);
    CHECK(att.at("pretreatment").contains("rmse"));
    CHECK(att.at("pretreatment").contains("coverage"));
    const auto csv = stgp::read_csv(dir + "/att/att_by_time.csv");
    CHECK(csv.column("median") >= 0);
    CHECK(csv.rows.size() == 10);
  }

  SECTION("weights CSV has one row per (target, donor) pair") {
    REQUIRE(run_cli("weights --fit " + dir + "/fit --out " + dir + "/w") == 0);
    const auto csv = stgp::read_csv(dir + "/w/weights.csv");
    // pipeline preset: 36 units, 5 treated, T = 10, T* = 10
    const std::size_t n_mis = 5 * 1, n_obs = 36 * 10 - 5;
    CHECK(csv.rows.size() == n_mis * n_obs);
    CHECK(csv.header == std::vector<std::string>{"target_unit", "target_time", "donor_unit",
                                                 "donor_time", "weight"});
    CHECK(fs::exists(dir + "/w/spatial_avg.csv"));
    CHECK(fs::exists(dir + "/w/spatial_grid.csv"));
  }

  SECTION("diagnose emits curves, boxplot data, and a verdict") {
    const json verdict = load(dir + "/diag/verdict.json");
    CHECK(verdict.contains("eta_median"));
    CHECK(verdict.contains("eta_frac_below_threshold"));
    const std::string v = verdict.at("verdict").get<std::string>();
    CHECK((v == "near-separable" || v == "nonseparable"));
    if (verdict.at("eta_median").get<double>() < 0.05) CHECK(v == "near-separable");
    const auto boxplot = stgp::read_csv(dir + "/diag/boxplot.csv");
    CHECK(boxplot.header == std::vector<std::string>{"u", "median", "lo50", "hi50"});
    CHECK(boxplot.rows.size() == 9);  // u = 1..9
    const auto curves = stgp::read_csv(dir + "/diag/curves.csv");
    CHECK(curves.header ==
          std::vector<std::string>{"curve_id", "u", "value", "is_outlier"});
  }

  SECTION("manifests pin the configuration hash") {
    const json m = load(dir + "/fit/manifest.json");
    CHECK(m.at("command") == "fit");
    CHECK(m.contains("config_hash"));
    CHECK(m.at("seed") == 7);
  }
}

TEST_CASE("fit reruns with one seed reproduce the chain files") {
  const auto dir = stgp::testutil::temp_dir("cli_det");
  REQUIRE(run_cli("simulate --config '{\"name\":\"t\",\"nx\":3,\"ny\":3,\"n_times\":5,"
                  "\"n_treated\":2,\"t_star\":4,\"kernel\":{\"kernel\":\"rbf_rbf\",\"tau2\":1,"
                  "\"l_s\":0.3,\"l_t\":0.9},\"likelihood\":\"normal\",\"sigma2\":0.05,"
                  "\"mu0\":4}' --seed 5 --out " + dir + "/sim") == 0);
  const std::string fit_args = "fit --panel " + dir + "/sim/panel.csv --kernel "
                               "'{\"kernel\":\"rbf_rbf\"}' --sampler " + kTinySampler + " --out ";
  REQUIRE(run_cli(fit_args + dir + "/f1") == 0);
  REQUIRE(run_cli(fit_args + dir + "/f2") == 0);
  CHECK(slurp(dir + "/f1/chains.csv") == slurp(dir + "/f2/chains.csv"));
  CHECK(slurp(dir + "/f1/cf_draws.csv") == slurp(dir + "/f2/cf_draws.csv"));
}

TEST_CASE("true-kernel weights run without a fit") {
  const auto dir = stgp::testutil::temp_dir("cli_wtrue");
  REQUIRE(run_cli("simulate --preset illustration --seed 9 --out " + dir + "/sim") == 0);
  REQUIRE(run_cli("weights --panel " + dir + "/sim/panel.csv --kernel "
                  "'{\"kernel\":\"rbf_rbf\",\"tau2\":1.0,\"l_s\":0.3,\"l_t\":0.9}' "
                  "--sigma2 0.1 --out " + dir + "/w") == 0);
  const auto csv = stgp::read_csv(dir + "/w/weights.csv");
  CHECK(csv.rows.size() == (4ul * 7) * (49ul * 15 - 4 * 7));
}
