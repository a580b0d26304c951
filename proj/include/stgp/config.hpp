#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stgp/causal.hpp"
#include "stgp/io.hpp"
#include "stgp/kernels.hpp"
#include "stgp/mcmc.hpp"
#include "stgp/panel.hpp"
#include "stgp/priors.hpp"
#include "stgp/simlab.hpp"

namespace stgp {

using nlohmann::json;

// --- kernel configuration ----------------------------------------------------
// {"kernel":"gneiting","tau2":1.0,"l_s":0.125,"l_t":0.57,"alpha":1.0,
//  "gamma":1.0,"eta":0.5}; ICM adds "rank_j" and "phi" (either "learned" or a
// row-major matrix of values).

inline json kernel_to_json(const KernelParams& params) {
  json j;
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, IcmRbfParams>) {
          j["kernel"] = "icm_rbf";
          j["l_t"] = p.l_t;
          j["rank_j"] = p.rank_j;
          j["tau2"] = p.tau2;
          if (p.phi.size() == 0) {
            j["phi"] = "learned";
          } else {
            std::vector<std::vector<double>> rows;
            for (Eigen::Index r = 0; r < p.phi.rows(); ++r) {
              std::vector<double> row;
              for (Eigen::Index c = 0; c < p.phi.cols(); ++c) row.push_back(p.phi(r, c));
              rows.push_back(std::move(row));
            }
            j["phi"] = rows;
          }
        } else if constexpr (std::is_same_v<T, RbfRbfParams>) {
          j["kernel"] = "rbf_rbf";
          j["tau2"] = p.tau2;
          j["l_s"] = p.l_s;
          j["l_t"] = p.l_t;
        } else {
          j["kernel"] = "gneiting";
          j["tau2"] = p.tau2;
          j["l_s"] = p.l_s;
          j["l_t"] = p.l_t;
          j["alpha"] = p.alpha;
          j["gamma"] = p.gamma;
          j["eta"] = p.eta;
        }
      },
      params);
  return j;
}

inline KernelParams kernel_from_json(const json& j) {
  if (!j.contains("kernel")) throw std::invalid_argument("kernel config: missing \"kernel\"");
  const std::string name = j.at("kernel").get<std::string>();
  if (name == "icm_rbf") {
    IcmRbfParams p;
    p.l_t = j.value("l_t", 1.0);
    p.rank_j = j.value("rank_j", 5);
    p.tau2 = j.value("tau2", 1.0);
    if (j.contains("phi") && j.at("phi").is_array()) {
      const auto rows = j.at("phi").get<std::vector<std::vector<double>>>();
      p.phi = MatrixXd(rows.size(), p.rank_j);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (static_cast<int>(rows[r].size()) != p.rank_j)
          throw std::invalid_argument("kernel config: phi rows must have rank_j entries");
        for (int c = 0; c < p.rank_j; ++c) p.phi(static_cast<Eigen::Index>(r), c) = rows[r][c];
      }
    }
    return p;
  }
  if (name == "rbf_rbf") {
    RbfRbfParams p;
    p.tau2 = j.value("tau2", 1.0);
    p.l_s = j.value("l_s", 1.0);
    p.l_t = j.value("l_t", 1.0);
    return p;
  }
  if (name == "gneiting") {
    GneitingParams p;
    p.tau2 = j.value("tau2", 1.0);
    p.l_s = j.value("l_s", 1.0);
    p.l_t = j.value("l_t", 1.0);
    p.alpha = j.value("alpha", 1.0);
    p.gamma = j.value("gamma", 1.0);
    p.eta = j.value("eta", 0.5);
    return p;
  }
  throw std::invalid_argument("kernel config: unknown kernel '" + name + "'");
}

// --- sampler configuration ---------------------------------------------------
// {"chains":4,"iters":1000,"burn_in":500,"seed":20250829}

inline json sampler_to_json(const SamplerConfig& c) {
  return json{{"chains", c.chains}, {"iters", c.iters}, {"burn_in", c.burn_in},
              {"seed", c.seed},     {"jobs", c.jobs}};
}

inline SamplerConfig sampler_from_json(const json& j) {
  SamplerConfig c;
  c.chains = j.value("chains", 4);
  c.iters = j.value("iters", 1000);
  c.burn_in = j.value("burn_in", 500);
  c.seed = j.value("seed", static_cast<std::uint64_t>(20250829));
  c.jobs = j.value("jobs", 1);
  return c;
}

// --- priors -------------------------------------------------------------------

inline json prior_to_json(const Prior& p) {
  return std::visit(
      [](const auto& d) -> json {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, InvGammaPrior>)
          return json{{"dist", "inv_gamma"}, {"shape", d.shape}, {"scale", d.scale}};
        else if constexpr (std::is_same_v<T, UniformPrior>)
          return json{{"dist", "uniform"}, {"lo", d.lo}, {"hi", d.hi}};
        else if constexpr (std::is_same_v<T, NormalPrior>)
          return json{{"dist", "normal"}, {"mean", d.mean}, {"sd", d.sd}};
        else if constexpr (std::is_same_v<T, TruncNormalPrior>)
          return json{{"dist", "trunc_normal"},
                      {"mean", d.mean},
                      {"sd", d.sd},
                      {"lo", d.lo},
                      {"hi", d.hi}};
        else if constexpr (std::is_same_v<T, BetaPrior>)
          return json{{"dist", "beta"}, {"a", d.a}, {"b", d.b}};
        else
          return json{{"dist", "flat"}};
      },
      p);
}

inline Prior prior_from_json(const json& j) {
  const std::string dist = j.at("dist").get<std::string>();
  constexpr double inf = std::numeric_limits<double>::infinity();
  if (dist == "inv_gamma") return InvGammaPrior{j.at("shape"), j.at("scale")};
  if (dist == "uniform") return UniformPrior{j.at("lo"), j.at("hi")};
  if (dist == "normal") return NormalPrior{j.at("mean"), j.at("sd")};
  if (dist == "trunc_normal")
    return TruncNormalPrior{j.at("mean"), j.at("sd"), j.value("lo", -inf), j.value("hi", inf)};
  if (dist == "beta") return BetaPrior{j.at("a"), j.at("b")};
  if (dist == "flat") return FlatPrior{};
  throw std::invalid_argument("prior config: unknown dist '" + dist + "'");
}

// "simulation", "application", a JSON file path, or an inline JSON object.
inline PriorSpec priors_from_arg(const std::string& arg, KernelFamily fam) {
  if (arg.empty() || arg == "simulation") return simulation_priors();
  if (arg == "application") return application_priors(fam);
  json j;
  if (!arg.empty() && arg.front() == '{') {
    j = json::parse(arg);
  } else {
    std::ifstream in(arg);
    if (!in) throw std::invalid_argument("cannot open priors file: " + arg);
    in >> j;
  }
  PriorSpec spec = simulation_priors();  // unspecified names keep defaults
  for (auto it = j.begin(); it != j.end(); ++it) spec[it.key()] = prior_from_json(it.value());
  return spec;
}

// --- DGP ------------------------------------------------------------------------

inline json dgp_to_json(const DgpSpec& d) {
  json j{{"name", d.name},
         {"nx", d.nx},
         {"ny", d.ny},
         {"n_times", d.n_times},
         {"n_treated", d.n_treated},
         {"t_star", d.t_star},
         {"kernel", kernel_to_json(d.kernel)},
         {"likelihood", likelihood_name(d.lik)},
         {"sigma2", d.sigma2},
         {"mu0", d.mu0},
         {"seed", d.seed},
         {"delta_sd", d.delta_sd},
         {"offsets", d.offsets},
         {"offset_lo", d.offset_lo},
         {"offset_hi", d.offset_hi}};
  if (!d.treated_units.empty()) j["treated_units"] = d.treated_units;
  return j;
}

inline DgpSpec dgp_from_json(const json& j) {
  DgpSpec d;
  d.name = j.value("name", "dgp");
  d.nx = j.value("nx", 7);
  d.ny = j.value("ny", 7);
  d.n_times = j.value("n_times", 15);
  d.n_treated = j.value("n_treated", 10);
  d.t_star = j.value("t_star", 8);
  if (j.contains("kernel")) d.kernel = kernel_from_json(j.at("kernel"));
  d.lik = likelihood_from_name(j.value("likelihood", "normal"));
  d.sigma2 = j.value("sigma2", 0.05);
  d.mu0 = j.value("mu0", 4.0);
  d.seed = j.value("seed", static_cast<std::uint64_t>(1));
  d.delta_sd = j.value("delta_sd", 0.0);
  d.offsets = j.value("offsets", false);
  d.offset_lo = j.value("offset_lo", 5e3);
  d.offset_hi = j.value("offset_hi", 5e4);
  if (j.contains("treated_units"))
    d.treated_units = j.at("treated_units").get<std::vector<int>>();
  return d;
}

// --- manifest -------------------------------------------------------------------

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline void write_manifest(const std::string& out_dir, const std::string& command,
                           const json& config, std::uint64_t seed,
                           const std::vector<std::string>& outputs) {
  json m{{"command", command},
         {"version", "0.1.0"},
         {"seed", seed},
         {"config", config},
         {"config_hash", fnv1a(config.dump())},
         {"outputs", outputs}};
  atomic_write_text(out_dir + "/manifest.json", m.dump(2) + "\n");
}

// --- fit artifacts ----------------------------------------------------------------
// chains.csv: chain,iter,name,value (kept iterations, iter counts from burn_in)
// cf_draws.csv: chain,iter,unit_id,time,value
// f_draws.csv (latent fits): chain,iter,f_<unit>_<time>... (wide)

inline void write_chainset(const std::string& dir, const ChainSet& set, const PanelData& panel) {
  {
    std::ostringstream os;
    os << "chain,iter,name,value\n";
    for (std::size_t c = 0; c < set.params.size(); ++c)
      for (int k = 0; k < set.kept(); ++k)
        for (std::size_t p = 0; p < set.param_names.size(); ++p)
          os << c << ',' << set.config.burn_in + k << ',' << set.param_names[p] << ','
             << fmt_double(set.params[c](k, static_cast<Eigen::Index>(p))) << "\n";
    atomic_write_text(dir + "/chains.csv", os.str());
  }
  {
    std::ostringstream os;
    os << "chain,iter,unit_id,time,value\n";
    for (std::size_t c = 0; c < set.cf.size(); ++c)
      for (int k = 0; k < set.kept(); ++k)
        for (std::size_t m = 0; m < set.mis_cells.size(); ++m)
          os << c << ',' << set.config.burn_in + k << ','
             << panel.unit_labels[static_cast<std::size_t>(set.mis_cells[m].unit)] << ','
             << fmt_double(panel.time_values(set.mis_cells[m].time)) << ','
             << fmt_double(set.cf[c](k, static_cast<Eigen::Index>(m))) << "\n";
    atomic_write_text(dir + "/cf_draws.csv", os.str());
  }
  if (set.lik != Likelihood::normal && set.latent_f.size() > 0 && set.latent_f[0].size() > 0) {
    std::ostringstream os;
    os << "chain,iter";
    for (int i = 0; i < set.n_units; ++i)
      for (int t = 0; t < set.n_times; ++t) os << ",f_" << i << '_' << t;
    os << "\n";
    for (std::size_t c = 0; c < set.latent_f.size(); ++c)
      for (int k = 0; k < set.kept(); ++k) {
        os << c << ',' << set.config.burn_in + k;
        for (Eigen::Index j = 0; j < set.latent_f[c].cols(); ++j)
          os << ',' << fmt_double(set.latent_f[c](k, j));
        os << "\n";
      }
    atomic_write_text(dir + "/f_draws.csv", os.str());
  }
}

// fit.json records everything needed to rebuild the ChainSet and re-derive
// predictions: family, likelihood, sampler, rank, and the mis-cell order.
inline void write_fit_config(const std::string& dir, const ChainSet& set, const PanelData& panel,
                             const std::string& panel_path, const json& kernel_config) {
  json j{{"kernel", kernel_config},
         {"family", family_name(set.fam)},
         {"likelihood", likelihood_name(set.lik)},
         {"sampler", sampler_to_json(set.config)},
         {"panel", panel_path},
         {"unit_fixed_effects", panel.unit_fixed_effects},
         {"rank_j", set.rank_j},
         {"learned_phi", set.learned_phi},
         {"param_names", set.param_names}};
  atomic_write_text(dir + "/fit.json", j.dump(2) + "\n");
}

inline ChainSet read_chainset(const std::string& dir, const PanelData& panel,
                              const std::map<std::string, int>& unit_index,
                              const std::map<double, int>& time_index) {
  std::ifstream cfg_in(dir + "/fit.json");
  if (!cfg_in) throw std::invalid_argument("missing fit artifact: " + dir + "/fit.json");
  json cfg;
  cfg_in >> cfg;

  ChainSet set;
  const std::string fam = cfg.at("family").get<std::string>();
  set.fam = fam == "icm_rbf"   ? KernelFamily::icm_rbf
            : fam == "rbf_rbf" ? KernelFamily::rbf_rbf
                               : KernelFamily::gneiting;
  set.lik = likelihood_from_name(cfg.at("likelihood").get<std::string>());
  set.config = sampler_from_json(cfg.at("sampler"));
  set.rank_j = cfg.value("rank_j", 0);
  set.learned_phi = cfg.value("learned_phi", false);
  if (set.fam == KernelFamily::icm_rbf && !set.learned_phi) {
    const KernelParams kp = kernel_from_json(cfg.at("kernel"));
    set.fixed_phi = std::get<IcmRbfParams>(kp).phi;
  }
  set.param_names = cfg.at("param_names").get<std::vector<std::string>>();
  set.n_units = panel.n_units;
  set.n_times = panel.n_times;

  const int kept = set.kept();
  const int chains = set.config.chains;
  set.params.assign(chains, MatrixXd::Zero(kept, set.param_names.size()));

  std::map<std::string, int> name_idx;
  for (std::size_t i = 0; i < set.param_names.size(); ++i)
    name_idx[set.param_names[i]] = static_cast<int>(i);

  const CsvTable chains_csv = read_csv(dir + "/chains.csv");
  const int cc = chains_csv.column("chain"), ci = chains_csv.column("iter"),
            cn = chains_csv.column("name"), cv = chains_csv.column("value");
  if (cc < 0 || ci < 0 || cn < 0 || cv < 0)
    throw std::invalid_argument("chains.csv: unexpected header");
  for (const auto& row : chains_csv.rows) {
    const int c = static_cast<int>(parse_long(row[cc]));
    const int k = static_cast<int>(parse_long(row[ci])) - set.config.burn_in;
    const auto it = name_idx.find(row[cn]);
    if (it == name_idx.end()) throw std::invalid_argument("chains.csv: unknown name " + row[cn]);
    if (c < 0 || c >= chains || k < 0 || k >= kept)
      throw std::invalid_argument("chains.csv: row outside the configured chain layout");
    set.params[static_cast<std::size_t>(c)](k, it->second) = parse_double(row[cv]);
  }

  const CsvTable cf_csv = read_csv(dir + "/cf_draws.csv");
  const int fc = cf_csv.column("chain"), fi = cf_csv.column("iter"), fu = cf_csv.column("unit_id"),
            ft = cf_csv.column("time"), fv = cf_csv.column("value");
  if (fc < 0 || fi < 0 || fu < 0 || ft < 0 || fv < 0)
    throw std::invalid_argument("cf_draws.csv: unexpected header");
  // recover the mis-cell order from the first kept iteration of chain 0
  std::vector<int> col_of_cell(static_cast<std::size_t>(panel.n_cells()), -1);
  for (const auto& row : cf_csv.rows) {
    if (parse_long(row[fc]) != 0 || parse_long(row[fi]) != set.config.burn_in) continue;
    const int unit = unit_index.at(row[fu]);
    const int time = time_index.at(parse_double(row[ft]));
    if (col_of_cell[static_cast<std::size_t>(panel.cell_index(unit, time))] < 0) {
      col_of_cell[static_cast<std::size_t>(panel.cell_index(unit, time))] =
          static_cast<int>(set.mis_cells.size());
      set.mis_cells.push_back({unit, time});
    }
  }
  set.cf.assign(chains, MatrixXd::Zero(kept, set.mis_cells.size()));
  for (const auto& row : cf_csv.rows) {
    const int c = static_cast<int>(parse_long(row[fc]));
    const int k = static_cast<int>(parse_long(row[fi])) - set.config.burn_in;
    const int unit = unit_index.at(row[fu]);
    const int time = time_index.at(parse_double(row[ft]));
    const int col = col_of_cell[static_cast<std::size_t>(panel.cell_index(unit, time))];
    if (col < 0 || c < 0 || c >= chains || k < 0 || k >= kept)
      throw std::invalid_argument("cf_draws.csv: row outside the configured layout");
    set.cf[static_cast<std::size_t>(c)](k, col) = parse_double(row[fv]);
  }

  set.latent_f.assign(chains, MatrixXd());
  if (set.lik != Likelihood::normal) {
    std::ifstream probe(dir + "/f_draws.csv");
    if (probe) {
      const CsvTable f_csv = read_csv(dir + "/f_draws.csv");
      if (static_cast<int>(f_csv.header.size()) != 2 + panel.n_cells())
        throw std::invalid_argument("f_draws.csv: column count mismatch with the panel");
      for (int c = 0; c < chains; ++c)
        set.latent_f[static_cast<std::size_t>(c)] = MatrixXd::Zero(kept, panel.n_cells());
      for (const auto& row : f_csv.rows) {
        const int c = static_cast<int>(parse_long(row[0]));
        const int k = static_cast<int>(parse_long(row[1])) - set.config.burn_in;
        for (int j = 0; j < panel.n_cells(); ++j)
          set.latent_f[static_cast<std::size_t>(c)](k, j) =
              parse_double(row[static_cast<std::size_t>(2 + j)]);
      }
    }
  }
  for (int c = 0; c < chains; ++c)
    set.chain_seeds.push_back(derive_seed(set.config.seed, {0xC4A11ull, static_cast<std::uint64_t>(c)}));
  return set;
}

}  // namespace stgp
