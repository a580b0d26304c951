// stgp: Gaussian-process counterfactual estimation for panel data.
// Subcommands cover the whole pipeline: simulate -> fit -> att / weights /
// diagnose, plus the simulation study harness. Every run writes its outputs
// plus a manifest (command, config, config hash, seed) so reruns with the
// same seed reproduce files bit-exactly.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

#include "stgp/causal.hpp"
#include "stgp/config.hpp"
#include "stgp/diagnostics.hpp"
#include "stgp/mcmc.hpp"
#include "stgp/panel.hpp"
#include "stgp/simlab.hpp"
#include "stgp/weights.hpp"

namespace fs = std::filesystem;
using namespace stgp;

namespace {

json load_json_arg(const std::string& arg) {
  if (!arg.empty() && arg.front() == '{') return json::parse(arg);
  std::ifstream in(arg);
  if (!in) throw std::invalid_argument("cannot open JSON file: " + arg);
  json j;
  in >> j;
  return j;
}

int default_jobs() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// --- simulate ----------------------------------------------------------------

void write_simulation(const std::string& dir, const DgpSpec& spec, std::vector<std::string>& outs,
                      const std::string& prefix) {
  const SimTruth sim = generate(spec);
  fs::create_directories(dir);
  write_panel(dir + "/panel.csv", sim.panel);
  {
    std::ostringstream os;
    os << "unit_id,time,y0,f\n";
    for (int i = 0; i < sim.panel.n_units; ++i)
      for (int t = 0; t < sim.panel.n_times; ++t)
        os << sim.panel.unit_labels[static_cast<std::size_t>(i)] << ','
           << fmt_double(sim.panel.time_values(t)) << ',' << fmt_double(sim.panel.y(i, t)) << ','
           << fmt_double(sim.f(sim.panel.cell_index(i, t))) << "\n";
    atomic_write_text(dir + "/truth.csv", os.str());
  }
  json resolved = dgp_to_json(spec);
  resolved["kernel"] = kernel_to_json(sim.kernel);  // includes drawn ICM factors
  atomic_write_text(dir + "/dgp.json", resolved.dump(2) + "\n");
  outs.push_back(prefix + "panel.csv");
  outs.push_back(prefix + "truth.csv");
  outs.push_back(prefix + "dgp.json");
}

int cmd_simulate(const std::string& preset, const std::string& config_arg, const std::string& out,
                 std::optional<std::uint64_t> seed) {
  std::vector<DgpSpec> specs;
  json config;
  if (!config_arg.empty()) {
    config = load_json_arg(config_arg);
    specs.push_back(dgp_from_json(config));
  } else if (preset == "paper-normal" || preset == "paper-poisson" || preset == "desk-normal" ||
             preset == "desk-poisson") {
    const bool paper = preset.rfind("paper", 0) == 0;
    const Likelihood lik =
        preset.find("poisson") != std::string::npos ? Likelihood::poisson : Likelihood::normal;
    specs = dgp_presets(paper ? "paper" : "desk", lik);
    config = json{{"preset", preset}};
  } else if (preset == "illustration") {
    specs.push_back(illustration_preset());
    config = json{{"preset", preset}};
  } else if (preset == "pipeline") {
    specs.push_back(pipeline_preset());
    config = json{{"preset", preset}};
  } else {
    throw std::invalid_argument("simulate: pass --config or a known --preset "
                                "(paper-normal, paper-poisson, desk-normal, desk-poisson, "
                                "illustration, pipeline)");
  }
  std::uint64_t master = seed.value_or(specs.front().seed);
  std::vector<std::string> outs;
  if (specs.size() == 1) {
    specs[0].seed = master;
    write_simulation(out, specs[0], outs, "");
  } else {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      specs[i].seed = derive_seed(master, {0x51Aull, static_cast<std::uint64_t>(i)});
      write_simulation(out + "/" + specs[i].name, specs[i], outs, specs[i].name + "/");
    }
  }
  config["seed"] = master;
  write_manifest(out, "simulate", config, master, outs);
  std::cout << "simulate: wrote " << outs.size() << " files under " << out << "\n";
  return 0;
}

// --- fit ----------------------------------------------------------------------

int cmd_fit(const std::string& panel_path, const std::string& kernel_arg,
            const std::string& likelihood, const std::string& sampler_arg,
            const std::string& priors_arg, bool fixed_effects, const std::string& out,
            std::optional<std::uint64_t> seed, int jobs) {
  const json kernel_cfg = load_json_arg(kernel_arg);
  const KernelParams kernel = kernel_from_json(kernel_cfg);
  SamplerConfig sampler =
      sampler_arg.empty() ? SamplerConfig{} : sampler_from_json(load_json_arg(sampler_arg));
  if (seed) sampler.seed = *seed;
  sampler.jobs = jobs;
  const Likelihood lik = likelihood_from_name(likelihood);

  PanelLoad loaded = load_panel(panel_path);
  loaded.panel.unit_fixed_effects = fixed_effects;
  const PriorSpec priors = priors_from_arg(priors_arg, family(kernel));

  const ChainSet chains = run_mcmc(loaded.panel, kernel, lik, priors, sampler);

  fs::create_directories(out);
  write_chainset(out, chains, loaded.panel);
  write_fit_config(out, chains, loaded.panel, panel_path, kernel_cfg);

  const FitReport report = fit_report(chains);
  json rhat_json{{"threshold", report.threshold},
                 {"converged", report.converged},
                 {"avg_cf_rhat", report.avg_cf_rhat},
                 {"max_cf_rhat", report.max_cf_rhat},
                 {"flagged", report.flagged}};
  for (const auto& [name, value] : report.rhat_by_param) rhat_json["by_param"][name] = value;
  atomic_write_text(out + "/rhat.json", rhat_json.dump(2) + "\n");
  if (!report.converged)
    std::cerr << "warning: R-hat gate failed for " << report.flagged.size()
              << " quantities (threshold " << report.threshold << ")\n";

  json config{{"panel", panel_path},           {"kernel", kernel_cfg},
              {"likelihood", likelihood},      {"sampler", sampler_to_json(sampler)},
              {"priors", priors_arg.empty() ? "simulation" : priors_arg},
              {"unit_fixed_effects", fixed_effects}};
  std::vector<std::string> outs{"chains.csv", "cf_draws.csv", "fit.json", "rhat.json"};
  if (lik != Likelihood::normal) outs.push_back("f_draws.csv");
  write_manifest(out, "fit", config, sampler.seed, outs);
  std::cout << "fit: " << chains.config.chains << " chains x " << chains.kept()
            << " kept draws; avg counterfactual R-hat " << report.avg_cf_rhat << "\n";
  return 0;
}

// --- att ------------------------------------------------------------------------

int cmd_att(const std::string& fit_dir, const std::string& panel_arg, bool rate_scale,
            int pre_thin, const std::string& out) {
  json fit_cfg = load_json_arg(fit_dir + "/fit.json");
  const std::string panel_path = panel_arg.empty() ? fit_cfg.at("panel").get<std::string>() : panel_arg;
  PanelLoad loaded = load_panel(panel_path);
  loaded.panel.unit_fixed_effects = fit_cfg.value("unit_fixed_effects", false);
  const ChainSet chains = read_chainset(fit_dir, loaded.panel, loaded.unit_index, loaded.time_index);

  const CounterfactualDraws cf = counterfactuals(chains);
  const CounterfactualDraws pre = pretreatment_predict(loaded.panel, chains, pre_thin);
  const AttSummary s = att_draws(loaded.panel, cf, rate_scale, &pre);
  const PretreatmentFit pf = pretreatment_fit(loaded.panel, pre, rate_scale);

  json att_json{{"att", {{"median", s.median}, {"lo", s.lo}, {"hi", s.hi}}},
                {"rate_scale", rate_scale},
                {"n_draws", s.att.size()},
                {"pretreatment",
                 {{"rmse", pf.rmse}, {"coverage", pf.coverage}, {"n_cells", pf.n_cells}}}};
  json per_time = json::array();
  for (int t = 0; t < loaded.panel.n_times; ++t) {
    json row{{"time", loaded.panel.time_values(t)},
             {"phase", (t + 1) >= loaded.panel.t_star ? "post" : "pre"}};
    if (!std::isnan(s.time_median(t))) {
      row["median"] = s.time_median(t);
      row["lo"] = s.time_lo(t);
      row["hi"] = s.time_hi(t);
    }
    per_time.push_back(row);
  }
  att_json["att_by_time"] = per_time;
  fs::create_directories(out);
  atomic_write_text(out + "/att.json", att_json.dump(2) + "\n");

  std::ostringstream os;
  os << "time,phase,median,lo,hi\n";
  for (int t = 0; t < loaded.panel.n_times; ++t) {
    if (std::isnan(s.time_median(t))) continue;
    os << fmt_double(loaded.panel.time_values(t)) << ','
       << ((t + 1) >= loaded.panel.t_star ? "post" : "pre") << ','
       << fmt_double(s.time_median(t)) << ',' << fmt_double(s.time_lo(t)) << ','
       << fmt_double(s.time_hi(t)) << "\n";
  }
  atomic_write_text(out + "/att_by_time.csv", os.str());

  json config{{"fit", fit_dir}, {"panel", panel_path}, {"rate_scale", rate_scale},
              {"pre_thin", pre_thin}};
  write_manifest(out, "att", config, chains.config.seed, {"att.json", "att_by_time.csv"});
  std::cout << "att: median " << s.median << " (" << s.lo << ", " << s.hi << ")"
            << (rate_scale ? " per 100000" : "") << "\n";
  return 0;
}

// --- weights ---------------------------------------------------------------------

bool grid_layout(const PanelData& panel, std::vector<double>& xs, std::vector<double>& ys) {
  std::set<double> xset, yset;
  for (int i = 0; i < panel.n_units; ++i) {
    xset.insert(panel.coords(i, 0));
    yset.insert(panel.coords(i, 1));
  }
  if (static_cast<int>(xset.size() * yset.size()) != panel.n_units) return false;
  xs.assign(xset.begin(), xset.end());
  ys.assign(yset.begin(), yset.end());
  return true;
}

int cmd_weights(const std::string& fit_dir, const std::string& panel_arg,
                const std::string& kernel_arg, double sigma2_arg, int target_unit_arg,
                double target_time_arg, const std::string& out) {
  KernelParams params = RbfRbfParams{};
  double sigma2 = 0.0;
  std::string panel_path = panel_arg;
  json config;

  PanelLoad loaded = [&] {
    if (!kernel_arg.empty()) {
      // true-kernel mode: weights from a given kernel configuration
      if (panel_arg.empty())
        throw std::invalid_argument("weights: --panel is required with --kernel");
      const json kernel_cfg = load_json_arg(kernel_arg);
      params = kernel_from_json(kernel_cfg);
      sigma2 = sigma2_arg;
      config = json{{"kernel", kernel_cfg}, {"sigma2", sigma2}, {"panel", panel_arg}};
      return load_panel(panel_arg);
    }
    // fitted mode: posterior medians from a fit directory
    json fit_cfg = load_json_arg(fit_dir + "/fit.json");
    panel_path = panel_arg.empty() ? fit_cfg.at("panel").get<std::string>() : panel_arg;
    PanelLoad pl = load_panel(panel_path);
    pl.panel.unit_fixed_effects = fit_cfg.value("unit_fixed_effects", false);
    const ChainSet chains = read_chainset(fit_dir, pl.panel, pl.unit_index, pl.time_index);
    const auto layout = detail::hyper_layout(chains.fam, chains.lik);
    VectorXd nat(layout.size());
    for (int i = 0; i < layout.size(); ++i) nat(i) = chains.posterior_median(layout.names[i]);
    MatrixXd phi;
    if (chains.fam == KernelFamily::icm_rbf) {
      if (chains.learned_phi) {
        phi = MatrixXd(chains.n_units, chains.rank_j);
        for (int i = 0; i < chains.n_units; ++i)
          for (int j = 0; j < chains.rank_j; ++j)
            phi(i, j) = chains.posterior_median("phi[" + std::to_string(i) + "," +
                                                std::to_string(j) + "]");
      } else {
        phi = chains.fixed_phi;
      }
    }
    params = detail::make_kernel(chains.fam, layout, nat, phi, chains.rank_j);
    sigma2 = chains.lik == Likelihood::normal ? nat(layout.index("sigma2")) : 0.0;
    config = json{{"fit", fit_dir}, {"panel", panel_path}, {"sigma2", sigma2},
                  {"kernel", kernel_to_json(params)}};
    return pl;
  }();

  const PanelData& panel = loaded.panel;
  const auto part = partition(panel);
  const MatrixXd k_obs = cross_covariance(panel, params, part.obs, part.obs);
  const MatrixXd k_mo = cross_covariance(panel, params, part.mis, part.obs);
  const DonorWeights dw = donor_weights(k_mo, k_obs, sigma2, part.mis, part.obs);
  const WeightSummaries ws = weight_summaries(dw, panel);

  fs::create_directories(out);
  std::vector<std::string> outs;
  {
    std::ostringstream os;
    os << "target_unit,target_time,donor_unit,donor_time,weight\n";
    for (std::size_t r = 0; r < dw.targets.size(); ++r)
      for (std::size_t c = 0; c < dw.donors.size(); ++c)
        os << panel.unit_labels[static_cast<std::size_t>(dw.targets[r].unit)] << ','
           << fmt_double(panel.time_values(dw.targets[r].time)) << ','
           << panel.unit_labels[static_cast<std::size_t>(dw.donors[c].unit)] << ','
           << fmt_double(panel.time_values(dw.donors[c].time)) << ','
           << fmt_double(dw.w(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)))
           << "\n";
    atomic_write_text(out + "/weights.csv", os.str());
    outs.push_back("weights.csv");
  }
  {
    std::ostringstream os;
    os << "target_unit,target_time,donor_unit,avg_weight\n";
    for (std::size_t r = 0; r < dw.targets.size(); ++r)
      for (int i = 0; i < panel.n_units; ++i)
        os << panel.unit_labels[static_cast<std::size_t>(dw.targets[r].unit)] << ','
           << fmt_double(panel.time_values(dw.targets[r].time)) << ','
           << panel.unit_labels[static_cast<std::size_t>(i)] << ','
           << fmt_double(ws.spatial_avg(static_cast<Eigen::Index>(r), i)) << "\n";
    atomic_write_text(out + "/spatial_avg.csv", os.str());
    outs.push_back("spatial_avg.csv");
  }

  // wide grid summary matching the unit layout, when the panel is a grid
  std::vector<double> xs, ys;
  if (grid_layout(panel, xs, ys)) {
    std::map<std::pair<double, double>, int> cell_unit;
    for (int i = 0; i < panel.n_units; ++i)
      cell_unit[{panel.coords(i, 0), panel.coords(i, 1)}] = i;
    // time-averaged map per treated unit (rows y, columns x)
    std::map<int, VectorXd> avg_by_unit;
    std::map<int, int> count_by_unit;
    for (std::size_t r = 0; r < dw.targets.size(); ++r) {
      auto [it, fresh] =
          avg_by_unit.try_emplace(dw.targets[r].unit, VectorXd::Zero(panel.n_units));
      it->second += ws.spatial_avg.row(static_cast<Eigen::Index>(r)).transpose();
      ++count_by_unit[dw.targets[r].unit];
    }
    std::ostringstream os;
    for (auto& [unit, acc] : avg_by_unit) {
      acc /= count_by_unit[unit];
      os << "# treated unit " << panel.unit_labels[static_cast<std::size_t>(unit)] << "\n";
      for (auto yit = ys.rbegin(); yit != ys.rend(); ++yit) {
        for (std::size_t cx = 0; cx < xs.size(); ++cx)
          os << (cx ? "," : "") << fmt_double(acc(cell_unit.at({xs[cx], *yit})));
        os << "\n";
      }
    }
    atomic_write_text(out + "/spatial_grid.csv", os.str());
    outs.push_back("spatial_grid.csv");
  }

  // per-donor-time map for a chosen target cell
  if (target_unit_arg >= 0) {
    const auto uit = loaded.unit_index.find(std::to_string(target_unit_arg));
    if (uit == loaded.unit_index.end())
      throw std::invalid_argument("weights: unknown --target-unit");
    const auto tit = loaded.time_index.find(target_time_arg);
    if (tit == loaded.time_index.end())
      throw std::invalid_argument("weights: unknown --target-time");
    int row = -1;
    for (std::size_t r = 0; r < dw.targets.size(); ++r)
      if (dw.targets[r].unit == uit->second && dw.targets[r].time == tit->second)
        row = static_cast<int>(r);
    if (row < 0)
      throw std::invalid_argument("weights: target cell is not a treated post-treatment cell");
    const MatrixXd& grid = ws.donor_grids[static_cast<std::size_t>(row)];
    std::ostringstream os;
    os << "donor_unit";
    for (int t = 0; t < panel.n_times; ++t) os << ",t" << fmt_double(panel.time_values(t));
    os << "\n";
    for (int i = 0; i < panel.n_units; ++i) {
      os << panel.unit_labels[static_cast<std::size_t>(i)];
      for (int t = 0; t < panel.n_times; ++t) os << ',' << fmt_double(grid(i, t));
      os << "\n";
    }
    atomic_write_text(out + "/target_map.csv", os.str());
    outs.push_back("target_map.csv");
  }

  write_manifest(out, "weights", config, 0, outs);
  std::cout << "weights: " << dw.targets.size() << " targets x " << dw.donors.size()
            << " donors\n";
  return 0;
}

// --- diagnose -----------------------------------------------------------------------

int cmd_diagnose(const std::string& fit_dir, const std::string& panel_arg, int h_steps,
                 double eta_threshold, int draw_curves, const std::string& out) {
  json fit_cfg = load_json_arg(fit_dir + "/fit.json");
  const std::string panel_path = panel_arg.empty() ? fit_cfg.at("panel").get<std::string>() : panel_arg;
  PanelLoad loaded = load_panel(panel_path);
  loaded.panel.unit_fixed_effects = fit_cfg.value("unit_fixed_effects", false);
  const ChainSet chains = read_chainset(fit_dir, loaded.panel, loaded.unit_index, loaded.time_index);

  const VectorXd h = default_h_grid(loaded.panel, h_steps);
  const VectorXd u = default_u_grid(loaded.panel);
  const FhatResult res = estimate_fhat(chains, h, u, eta_threshold, draw_curves);

  fs::create_directories(out);
  {
    std::ostringstream os;
    os << "h,u,value\n";
    for (Eigen::Index a = 0; a < h.size(); ++a)
      for (Eigen::Index b = 0; b < u.size(); ++b)
        os << fmt_double(h(a)) << ',' << fmt_double(u(b)) << ','
           << fmt_double(res.curves.curves(a, b)) << "\n";
    atomic_write_text(out + "/fhat_curves.csv", os.str());
  }

  // functional boxplot across the h-indexed curve family (plus optional
  // per-draw families)
  MatrixXd family = res.curves.curves;
  for (const auto& extra : res.draw_curves) {
    MatrixXd merged(family.rows() + extra.rows(), family.cols());
    merged << family, extra;
    family = std::move(merged);
  }
  const FunctionalBoxplot box = functional_boxplot(family);
  {
    std::ostringstream os;
    os << "u,median,lo50,hi50\n";
    for (Eigen::Index b = 0; b < u.size(); ++b)
      os << fmt_double(u(b)) << ',' << fmt_double(box.median_curve(b)) << ','
         << fmt_double(box.lo50(b)) << ',' << fmt_double(box.hi50(b)) << "\n";
    atomic_write_text(out + "/boxplot.csv", os.str());
  }
  {
    std::ostringstream os;
    os << "curve_id,u,value,is_outlier\n";
    std::set<int> outlier_set(box.outliers.begin(), box.outliers.end());
    for (Eigen::Index c = 0; c < family.rows(); ++c)
      for (Eigen::Index b = 0; b < u.size(); ++b)
        os << c << ',' << fmt_double(u(b)) << ',' << fmt_double(family(c, b)) << ','
           << (outlier_set.count(static_cast<int>(c)) ? 1 : 0) << "\n";
    atomic_write_text(out + "/curves.csv", os.str());
  }

  json verdict{{"eta_median", res.eta_median},
               {"eta_frac_below_threshold", res.eta_frac_below},
               {"eta_threshold", res.eta_threshold},
               {"verdict", res.near_separable ? "near-separable" : "nonseparable"},
               {"message", res.near_separable
                               ? "interaction estimate is near zero; the deviation curves are "
                                 "flat and a separable kernel is adequate for these data"
                               : "interaction estimate is away from zero; the deviation curves "
                                 "carry space-time structure"},
               {"kernel_at_medians", kernel_to_json(KernelParams{res.at_medians})}};
  if (!res.rhat_ok) verdict["rhat_warning"] = res.warning;
  atomic_write_text(out + "/verdict.json", verdict.dump(2) + "\n");

  json config{{"fit", fit_dir},
              {"panel", panel_path},
              {"h_steps", h_steps},
              {"eta_threshold", eta_threshold},
              {"draw_curves", draw_curves}};
  write_manifest(out, "diagnose", config, chains.config.seed,
                 {"fhat_curves.csv", "boxplot.csv", "curves.csv", "verdict.json"});
  std::cout << "diagnose: eta median " << res.eta_median << " -> "
            << (res.near_separable ? "near-separable" : "nonseparable") << "\n";
  return 0;
}

// --- study --------------------------------------------------------------------------

int cmd_study(const std::string& preset, const std::string& config_arg, int replicates, int jobs,
              std::optional<std::uint64_t> seed, const std::string& out) {
  StudyConfig config;
  json config_json;
  if (!config_arg.empty()) {
    config_json = load_json_arg(config_arg);
    for (const auto& dj : config_json.at("dgps")) config.dgps.push_back(dgp_from_json(dj));
    if (config_json.contains("fit_kernels")) {
      for (const auto& kj : config_json.at("fit_kernels")) {
        FitKernelSpec fk;
        fk.kernel = kernel_from_json(kj);
        fk.name = family_name(family(fk.kernel));
        config.fit_kernels.push_back(fk);
      }
    } else {
      config.fit_kernels = default_fit_kernels();
    }
    if (config_json.contains("sampler"))
      config.sampler = sampler_from_json(config_json.at("sampler"));
    config.replicates = config_json.value("replicates", 20);
    config.master_seed = config_json.value("seed", static_cast<std::uint64_t>(20250829));
    if (config_json.value("bias_mode", "per_cell") == std::string("aggregate"))
      config.bias_mode = BiasMode::aggregate;
  } else {
    const bool paper = preset.rfind("paper", 0) == 0;
    const bool poisson = preset.find("poisson") != std::string::npos;
    if (preset != "desk-normal" && preset != "desk-poisson" && preset != "paper-normal" &&
        preset != "paper-poisson")
      throw std::invalid_argument("study: pass --config or a known --preset");
    config.dgps = dgp_presets(paper ? "paper" : "desk",
                              poisson ? Likelihood::poisson : Likelihood::normal);
    config.fit_kernels = default_fit_kernels();
    config.replicates = paper ? 100 : 20;
    config.sampler.chains = 4;
    config.sampler.iters = paper ? 1000 : 400;
    config.sampler.burn_in = paper ? 500 : 200;
    config_json = json{{"preset", preset}};
  }
  if (replicates > 0) config.replicates = replicates;
  if (seed) config.master_seed = *seed;
  config.jobs = jobs;
  config_json["replicates"] = config.replicates;
  config_json["seed"] = config.master_seed;

  const StudyResult result = run_study(config);

  fs::create_directories(out);
  {
    std::ostringstream os;
    os << "dgp,fit_kernel,likelihood,replicate,percent_bias,mse,coverage,ok,error\n";
    for (const auto& row : result.rows)
      os << row.dgp << ',' << row.fit_kernel << ',' << row.likelihood << ',' << row.replicate
         << ',' << fmt_double(row.m.percent_bias) << ',' << fmt_double(row.m.mse) << ','
         << fmt_double(row.m.coverage95) << ',' << (row.ok ? 1 : 0) << ','
         << (row.ok ? "" : row.error) << "\n";
    atomic_write_text(out + "/study_rows.csv", os.str());
  }
  {
    std::ostringstream os;
    os << "dgp,fit_kernel,likelihood,percent_bias,mse,coverage,n_ok,n_failed\n";
    for (const auto& a : result.aggregates)
      os << a.dgp << ',' << a.fit_kernel << ',' << a.likelihood << ','
         << fmt_double(a.percent_bias) << ',' << fmt_double(a.mse) << ','
         << fmt_double(a.coverage95) << ',' << a.n_ok << ',' << a.n_failed << "\n";
    atomic_write_text(out + "/study_aggregate.csv", os.str());
  }
  write_manifest(out, "study", config_json, config.master_seed,
                 {"study_rows.csv", "study_aggregate.csv"});
  std::cout << "study: " << result.rows.size() << " runs -> " << out << "\n";
  for (const auto& a : result.aggregates)
    std::cout << "  " << a.dgp << " / " << a.fit_kernel << ": bias " << a.percent_bias << ", mse "
              << a.mse << ", coverage " << a.coverage95
              << (a.n_failed ? (" (" + std::to_string(a.n_failed) + " failed)") : "") << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gaussian-process counterfactual estimation for spatio-temporal panels"};
  app.require_subcommand(1);

  std::string out, preset, config_arg, panel_path, kernel_arg, sampler_arg, priors_arg, fit_dir;
  std::string likelihood = "normal";
  bool fixed_effects = false, rate_scale = false;
  int jobs = default_jobs();
  int pre_thin = 4, h_steps = 10, draw_curves = 0, replicates = -1;
  int target_unit = -1;
  double target_time = -1.0, sigma2 = 0.0, eta_threshold = 0.05;
  std::optional<std::uint64_t> seed;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--out", out, "output directory")->required();
    cmd->add_option("--seed", seed, "master seed (overrides config seeds)");
    cmd->add_option("--jobs", jobs, "worker threads");
  };

  auto* sim = app.add_subcommand("simulate", "generate synthetic panels with retained truths");
  add_common(sim);
  sim->add_option("--preset", preset,
                  "paper-normal | paper-poisson | desk-normal | desk-poisson | illustration | "
                  "pipeline");
  sim->add_option("--config", config_arg, "DGP JSON (file or inline)");

  auto* fit = app.add_subcommand("fit", "posterior sampling for one panel");
  add_common(fit);
  fit->add_option("--panel", panel_path, "panel CSV")->required();
  fit->add_option("--kernel", kernel_arg, "kernel JSON (file or inline)")->required();
  fit->add_option("--likelihood", likelihood, "normal | poisson | bernoulli");
  fit->add_option("--sampler", sampler_arg, "sampler JSON (file or inline)");
  fit->add_option("--priors", priors_arg, "simulation | application | JSON");
  fit->add_flag("--fixed-effects", fixed_effects, "unit fixed effects in the mean");

  auto* att = app.add_subcommand("att", "treatment-effect summaries from a fit");
  add_common(att);
  att->add_option("--fit", fit_dir, "fit output directory")->required();
  att->add_option("--panel", panel_path, "panel CSV (defaults to the fit's panel)");
  att->add_flag("--rate-scale", rate_scale, "per-100,000 rate scale using the offsets");
  att->add_option("--pre-thin", pre_thin, "thinning for leave-block-out pre-treatment draws");

  auto* wts = app.add_subcommand("weights", "donor-weight maps");
  add_common(wts);
  wts->add_option("--fit", fit_dir, "fit output directory (posterior-median kernel)");
  wts->add_option("--panel", panel_path, "panel CSV");
  wts->add_option("--kernel", kernel_arg, "kernel JSON for true-kernel weights");
  wts->add_option("--sigma2", sigma2, "noise variance for true-kernel weights");
  wts->add_option("--target-unit", target_unit, "unit id for a per-time donor map");
  wts->add_option("--target-time", target_time, "time value for a per-time donor map");

  auto* diag = app.add_subcommand("diagnose", "separability diagnostics from a Gneiting fit");
  add_common(diag);
  diag->add_option("--fit", fit_dir, "fit output directory")->required();
  diag->add_option("--panel", panel_path, "panel CSV (defaults to the fit's panel)");
  diag->add_option("--h-steps", h_steps, "number of spatial lags");
  diag->add_option("--eta-threshold", eta_threshold, "near-zero threshold for the verdict");
  diag->add_option("--draw-curves", draw_curves, "add per-draw curve families to the boxplot");

  auto* study = app.add_subcommand("study", "bias/MSE/coverage study over DGP x kernel");
  add_common(study);
  study->add_option("--preset", preset, "desk-normal | desk-poisson | paper-normal | paper-poisson");
  study->add_option("--config", config_arg, "study JSON (file or inline)");
  study->add_option("--replicates", replicates, "override replicate count");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim->parsed()) return cmd_simulate(preset, config_arg, out, seed);
    if (fit->parsed())
      return cmd_fit(panel_path, kernel_arg, likelihood, sampler_arg, priors_arg, fixed_effects,
                     out, seed, jobs);
    if (att->parsed()) return cmd_att(fit_dir, panel_path, rate_scale, pre_thin, out);
    if (wts->parsed())
      return cmd_weights(fit_dir, panel_path, kernel_arg, sigma2, target_unit, target_time, out);
    if (diag->parsed())
      return cmd_diagnose(fit_dir, panel_path, h_steps, eta_threshold, draw_curves, out);
    if (study->parsed()) return cmd_study(preset, config_arg, replicates, jobs, seed, out);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::runtime_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
