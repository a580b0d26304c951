#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "stgp/linalg.hpp"
#include "stgp/mcmc.hpp"
#include "stgp/panel.hpp"

namespace stgp {

// M x |cells| matrix of Y(0) draws, columns aligned to `cells`.
struct CounterfactualDraws {
  MatrixXd draws;
  std::vector<CellId> cells;

  void check(const PanelData& panel) const {
    if (draws.rows() < 1) throw std::invalid_argument("counterfactual draws: need M >= 1");
    if (draws.cols() != static_cast<Eigen::Index>(cells.size()))
      throw std::invalid_argument("counterfactual draws: column/cell misalignment");
    for (const auto& c : cells)
      if (c.unit < 0 || c.unit >= panel.n_units || c.time < 0 || c.time >= panel.n_times)
        throw std::invalid_argument("counterfactual draws: cell outside the panel");
  }
};

inline CounterfactualDraws counterfactuals(const ChainSet& chains) {
  return {chains.stacked_cf(), chains.mis_cells};
}

struct AttSummary {
  VectorXd att;          // M overall ATT draws
  MatrixXd att_by_time;  // M x T; NaN in columns without draws
  double median = 0.0, lo = 0.0, hi = 0.0;
  VectorXd time_median, time_lo, time_hi;  // length T, NaN where undefined
  bool rate_scale = false;
  double rate_per = 1e5;
};

// ATT draws per the treated-post average: ATT^(m) = mean over treated-post
// cells of (Y_it - Y_it^(m)(0)); per-time ATT_t averages over the N1 treated
// units at each t. With rate_scale, observed and counterfactual outcomes are
// divided by the offset and scaled per 100,000 before differencing.
// `pre_draws`, when given, fills the pre-treatment columns of att_by_time
// with the same contrast evaluated on treated pre-treatment cells.
inline AttSummary att_draws(const PanelData& panel, const CounterfactualDraws& cf,
                            bool rate_scale = false,
                            const CounterfactualDraws* pre_draws = nullptr) {
  panel.validate();
  cf.check(panel);
  const auto part = partition(panel);
  if (cf.cells != part.mis)
    throw std::invalid_argument("att_draws: draws are not aligned to the mis index");

  const int m = static_cast<int>(cf.draws.rows());
  const int t_count = panel.n_times;
  const double nan = std::numeric_limits<double>::quiet_NaN();

  auto scale = [&](double value, int unit, int time) {
    return rate_scale ? value / panel.offset(unit, time) * 1e5 : value;
  };

  AttSummary s;
  s.rate_scale = rate_scale;
  s.att = VectorXd::Zero(m);
  s.att_by_time = MatrixXd::Constant(m, t_count, nan);

  // post-treatment columns
  std::vector<std::vector<int>> cols_by_time(t_count);
  for (std::size_t k = 0; k < cf.cells.size(); ++k)
    cols_by_time[cf.cells[k].time].push_back(static_cast<int>(k));
  for (int d = 0; d < m; ++d) {
    double total = 0.0;
    for (int t = 0; t < t_count; ++t) {
      if (cols_by_time[t].empty()) continue;
      double acc = 0.0;
      for (int k : cols_by_time[t]) {
        const auto& c = cf.cells[static_cast<std::size_t>(k)];
        acc += scale(panel.y(c.unit, c.time), c.unit, c.time) -
               scale(cf.draws(d, k), c.unit, c.time);
      }
      s.att_by_time(d, t) = acc / static_cast<double>(cols_by_time[t].size());
      total += acc;
    }
    s.att(d) = total / static_cast<double>(cf.cells.size());
  }

  // pre-treatment columns from leave-block-out predictions
  if (pre_draws != nullptr) {
    pre_draws->check(panel);
    if (pre_draws->draws.rows() < 1) throw std::invalid_argument("att_draws: empty pre draws");
    std::vector<std::vector<int>> pre_by_time(t_count);
    for (std::size_t k = 0; k < pre_draws->cells.size(); ++k) {
      const auto& c = pre_draws->cells[k];
      if (panel.is_treated_cell(c.unit, c.time))
        throw std::invalid_argument("att_draws: pre draws must cover pre-treatment cells");
      pre_by_time[c.time].push_back(static_cast<int>(k));
    }
    const int mp = static_cast<int>(pre_draws->draws.rows());
    for (int t = 0; t < t_count; ++t) {
      if (pre_by_time[t].empty()) continue;
      for (int d = 0; d < m; ++d) {
        const int dp = d % mp;  // recycle if the pre block was thinned
        double acc = 0.0;
        for (int k : pre_by_time[t]) {
          const auto& c = pre_draws->cells[static_cast<std::size_t>(k)];
          acc += scale(panel.y(c.unit, c.time), c.unit, c.time) -
                 scale(pre_draws->draws(dp, k), c.unit, c.time);
        }
        s.att_by_time(d, t) = acc / static_cast<double>(pre_by_time[t].size());
      }
    }
  }

  s.median = quantile(s.att, 0.5);
  s.lo = quantile(s.att, 0.025);
  s.hi = quantile(s.att, 0.975);
  s.time_median = VectorXd::Constant(t_count, nan);
  s.time_lo = VectorXd::Constant(t_count, nan);
  s.time_hi = VectorXd::Constant(t_count, nan);
  for (int t = 0; t < t_count; ++t) {
    if (std::isnan(s.att_by_time(0, t))) continue;
    s.time_median(t) = quantile(s.att_by_time.col(t), 0.5);
    s.time_lo(t) = quantile(s.att_by_time.col(t), 0.025);
    s.time_hi(t) = quantile(s.att_by_time.col(t), 0.975);
  }
  return s;
}

struct PretreatmentFit {
  VectorXd time_median, time_lo, time_hi;  // per pre-treatment period ATT, length T (NaN post)
  double rmse = 0.0;       // posterior-mean prediction error over treated pre cells
  double coverage = 0.0;   // share of treated pre cells with observed y inside the 95% band
  int n_cells = 0;
};

// Fit diagnostics over the treated pre-treatment block. `cf_pre` holds
// leave-block-out predictive draws for exactly those cells.
inline PretreatmentFit pretreatment_fit(const PanelData& panel, const CounterfactualDraws& cf_pre,
                                        bool rate_scale = false) {
  panel.validate();
  if (panel.t0() == 0) throw std::invalid_argument("pretreatment_fit: no pre-treatment periods");
  cf_pre.check(panel);
  std::vector<CellId> expected;
  for (int i = 0; i < panel.n_units; ++i) {
    if (!panel.treated[static_cast<std::size_t>(i)]) continue;
    for (int t = 0; t < panel.t0(); ++t) expected.push_back({i, t});
  }
  if (cf_pre.cells != expected)
    throw std::invalid_argument("pretreatment_fit: draws must cover treated pre cells in order");

  PretreatmentFit fit;
  fit.n_cells = static_cast<int>(expected.size());
  double sq = 0.0;
  int covered = 0;
  for (std::size_t k = 0; k < expected.size(); ++k) {
    const auto& c = expected[k];
    const double obs = panel.y(c.unit, c.time);
    const double mean = cf_pre.draws.col(static_cast<Eigen::Index>(k)).mean();
    sq += (mean - obs) * (mean - obs);
    const double lo = quantile(cf_pre.draws.col(static_cast<Eigen::Index>(k)), 0.025);
    const double hi = quantile(cf_pre.draws.col(static_cast<Eigen::Index>(k)), 0.975);
    if (obs >= lo && obs <= hi) ++covered;
  }
  fit.rmse = std::sqrt(sq / static_cast<double>(expected.size()));
  fit.coverage = static_cast<double>(covered) / static_cast<double>(expected.size());

  const double nan = std::numeric_limits<double>::quiet_NaN();
  fit.time_median = VectorXd::Constant(panel.n_times, nan);
  fit.time_lo = VectorXd::Constant(panel.n_times, nan);
  fit.time_hi = VectorXd::Constant(panel.n_times, nan);
  auto scale = [&](double value, int unit, int time) {
    return rate_scale ? value / panel.offset(unit, time) * 1e5 : value;
  };
  const int m = static_cast<int>(cf_pre.draws.rows());
  for (int t = 0; t < panel.t0(); ++t) {
    VectorXd att_t(m);
    for (int d = 0; d < m; ++d) {
      double acc = 0.0;
      int n = 0;
      for (std::size_t k = 0; k < expected.size(); ++k) {
        if (expected[k].time != t) continue;
        const auto& c = expected[k];
        acc += scale(panel.y(c.unit, c.time), c.unit, c.time) -
               scale(cf_pre.draws(d, static_cast<Eigen::Index>(k)), c.unit, c.time);
        ++n;
      }
      att_t(d) = acc / std::max(1, n);
    }
    fit.time_median(t) = quantile(att_t, 0.5);
    fit.time_lo(t) = quantile(att_t, 0.025);
    fit.time_hi(t) = quantile(att_t, 0.975);
  }
  return fit;
}

// Leave-block-out predictive draws for the treated pre-treatment block:
// conditioning set is every control-unit cell; the treated block never
// enters the conditioning.
inline CounterfactualDraws pretreatment_predict(const PanelData& panel, const ChainSet& chains,
                                                int thin = 1) {
  std::vector<CellId> targets, conditioning;
  for (int i = 0; i < panel.n_units; ++i) {
    const bool tr = panel.treated[static_cast<std::size_t>(i)] != 0;
    for (int t = 0; t < panel.n_times; ++t) {
      if (tr && t < panel.t0()) targets.push_back({i, t});
      if (!tr) conditioning.push_back({i, t});
    }
  }
  if (targets.empty()) throw std::invalid_argument("pretreatment_predict: no pre-treatment cells");
  return {posterior_block_predict(panel, chains, targets, conditioning, thin), targets};
}

}  // namespace stgp
