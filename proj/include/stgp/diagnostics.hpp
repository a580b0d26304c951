#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "stgp/kernels.hpp"
#include "stgp/mcmc.hpp"

namespace stgp {

// f_h(u) = k(h,u)/k(h,0) - k(0,u)/k(0,0) for the Gneiting covariance; zero
// everywhere exactly when the kernel is separable. tau2 cancels from both
// ratios, so the evaluation drops it up front and the result is invariant
// to tau2 bit-for-bit.
struct SeparabilityCurves {
  VectorXd h_grid;
  VectorXd u_grid;
  MatrixXd curves;  // |h_grid| x |u_grid|
};

inline SeparabilityCurves separability_function(const GneitingParams& params,
                                                const VectorXd& h_grid, const VectorXd& u_grid) {
  validate(KernelParams{params});
  GneitingParams unit = params;
  unit.tau2 = 1.0;
  SeparabilityCurves out;
  out.h_grid = h_grid;
  out.u_grid = u_grid;
  out.curves = MatrixXd::Zero(h_grid.size(), u_grid.size());
  for (Eigen::Index a = 0; a < h_grid.size(); ++a) {
    const double h2 = h_grid(a) * h_grid(a);
    const double k_h0 = k_gneiting_h2u2(h2, 0.0, unit);
    const double k_00 = k_gneiting_h2u2(0.0, 0.0, unit);
    if (k_h0 == 0.0 || k_00 == 0.0)
      throw std::runtime_error("separability_function: zero denominator in the test ratio");
    for (Eigen::Index b = 0; b < u_grid.size(); ++b) {
      const double u2 = u_grid(b) * u_grid(b);
      out.curves(a, b) =
          k_gneiting_h2u2(h2, u2, unit) / k_h0 - k_gneiting_h2u2(0.0, u2, unit) / k_00;
    }
  }
  return out;
}

inline VectorXd default_h_grid(const PanelData& panel, int steps = 10) {
  double max_d = 0.0;
  for (int i = 0; i < panel.n_units; ++i)
    for (int j = i + 1; j < panel.n_units; ++j)
      max_d = std::max(max_d, (panel.coords.row(i) - panel.coords.row(j)).norm());
  VectorXd h(steps);
  for (int k = 0; k < steps; ++k) h(k) = max_d * static_cast<double>(k + 1) / steps;
  return h;
}

inline VectorXd default_u_grid(const PanelData& panel) {
  VectorXd u(panel.n_times - 1);
  for (int k = 1; k < panel.n_times; ++k) u(k - 1) = static_cast<double>(k);
  return u;
}

// Plug-in estimate of the separability function from a fitted Gneiting
// model: posterior medians of the kernel parameters enter the f_h(u) ratio.
// Also reports how much eta posterior mass sits below the near-zero
// threshold, and carries a warning when the fit failed the R-hat gate.
struct FhatResult {
  SeparabilityCurves curves;
  GneitingParams at_medians;
  double eta_median = 0.0;
  double eta_frac_below = 0.0;  // share of draws with eta < threshold
  double eta_threshold = 0.05;
  bool near_separable = false;
  bool rhat_ok = true;
  std::string warning;
  std::vector<MatrixXd> draw_curves;  // optional per-draw curve families
};

inline FhatResult estimate_fhat(const ChainSet& chains, const VectorXd& h_grid,
                                const VectorXd& u_grid, double eta_threshold = 0.05,
                                int draw_curve_count = 0, double rhat_threshold = 1.05) {
  if (chains.fam != KernelFamily::gneiting)
    throw std::invalid_argument("estimate_fhat: needs a Gneiting fit");
  FhatResult res;
  res.eta_threshold = eta_threshold;
  GneitingParams p;
  p.tau2 = chains.posterior_median("tau2");
  p.l_s = chains.posterior_median("l_s");
  p.l_t = chains.posterior_median("l_t");
  p.alpha = std::max(chains.posterior_median("alpha"), kExponentEdge);
  p.gamma = std::max(chains.posterior_median("gamma"), kExponentEdge);
  p.eta = std::min(std::max(chains.posterior_median("eta"), 0.0), 1.0);
  res.at_medians = p;
  res.curves = separability_function(p, h_grid, u_grid);

  const VectorXd eta = chains.pooled("eta");
  res.eta_median = quantile(eta, 0.5);
  res.eta_frac_below =
      static_cast<double>((eta.array() < eta_threshold).count()) / static_cast<double>(eta.size());
  res.near_separable = res.eta_median < eta_threshold;

  const FitReport report = fit_report(chains, rhat_threshold);
  res.rhat_ok = report.converged;
  if (!report.converged)
    res.warning = "R-hat gate failed; separability diagnostics may be unreliable";

  if (draw_curve_count > 0) {
    // spread from parameter uncertainty: one curve family per (thinned) draw
    const int total = static_cast<int>(chains.params.size()) * chains.kept();
    const int step = std::max(1, total / draw_curve_count);
    const auto layout = detail::hyper_layout(chains.fam, chains.lik);
    for (int d = 0; d < total; d += step) {
      const int c = d / chains.kept();
      const int k = d % chains.kept();
      GneitingParams g;
      g.tau2 = chains.params[c](k, chains.param_index("tau2"));
      g.l_s = chains.params[c](k, chains.param_index("l_s"));
      g.l_t = chains.params[c](k, chains.param_index("l_t"));
      g.alpha = std::max(chains.params[c](k, chains.param_index("alpha")), kExponentEdge);
      g.gamma = std::max(chains.params[c](k, chains.param_index("gamma")), kExponentEdge);
      g.eta = std::min(std::max(chains.params[c](k, chains.param_index("eta")), 0.0), 1.0);
      res.draw_curves.push_back(separability_function(g, h_grid, u_grid).curves);
    }
  }
  return res;
}

// Modified band depth with bands from all curve pairs (MBD-2): for curve i,
// the average over pairs of the fraction of grid points where the curve lies
// inside the pair's envelope. Computed per grid point from the curve's rank:
// pairs bracketing value x are C(n-1,2) - C(below,2) - C(above,2), plus the
// n-1 pairs containing the curve itself; normalized by C(n,2).
inline VectorXd mbd_depth(const MatrixXd& curves) {
  const int n = static_cast<int>(curves.rows());
  const int p = static_cast<int>(curves.cols());
  if (n < 3) throw std::invalid_argument("mbd_depth: need at least 3 curves");
  const double pairs = 0.5 * n * (n - 1.0);
  VectorXd depth = VectorXd::Zero(n);
  std::vector<double> col(n);
  for (int j = 0; j < p; ++j) {
    for (int i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] = curves(i, j);
    std::vector<double> sorted = col;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < n; ++i) {
      const double x = col[static_cast<std::size_t>(i)];
      const auto lo = std::lower_bound(sorted.begin(), sorted.end(), x);
      const auto hi = std::upper_bound(sorted.begin(), sorted.end(), x);
      const double below = static_cast<double>(lo - sorted.begin());
      const double above = static_cast<double>(sorted.end() - hi);
      const double inside = (n - 1.0) * (n - 2.0) / 2.0 - below * (below - 1.0) / 2.0 -
                            above * (above - 1.0) / 2.0 + (n - 1.0);
      depth(i) += inside / pairs;
    }
  }
  return depth / static_cast<double>(p);
}

struct FunctionalBoxplot {
  VectorXd depth;          // per curve, in [0,1]
  int median_index = 0;
  VectorXd median_curve;
  VectorXd lo50, hi50;     // pointwise envelope of the deepest half
  std::vector<int> outliers;  // curves exiting the 1.5x-inflated envelope
};

// Functional boxplot over a family of curves (rows). Median = deepest curve;
// central region = pointwise envelope of the deepest 50%; outliers exit the
// envelope inflated by 1.5 times its width.
inline FunctionalBoxplot functional_boxplot(const MatrixXd& curves) {
  const int n = static_cast<int>(curves.rows());
  const int p = static_cast<int>(curves.cols());
  if (n < 3) throw std::invalid_argument("functional_boxplot: need at least 3 curves");
  FunctionalBoxplot box;
  box.depth = mbd_depth(curves);
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return box.depth(a) > box.depth(b); });
  box.median_index = order[0];
  box.median_curve = curves.row(box.median_index).transpose();

  const int central = std::max(2, (n + 1) / 2);
  box.lo50 = VectorXd::Constant(p, std::numeric_limits<double>::infinity());
  box.hi50 = VectorXd::Constant(p, -std::numeric_limits<double>::infinity());
  for (int r = 0; r < central; ++r)
    for (int j = 0; j < p; ++j) {
      box.lo50(j) = std::min(box.lo50(j), curves(order[static_cast<std::size_t>(r)], j));
      box.hi50(j) = std::max(box.hi50(j), curves(order[static_cast<std::size_t>(r)], j));
    }

  for (int i = 0; i < n; ++i) {
    bool out = false;
    for (int j = 0; j < p && !out; ++j) {
      const double width = box.hi50(j) - box.lo50(j);
      if (curves(i, j) > box.hi50(j) + 1.5 * width || curves(i, j) < box.lo50(j) - 1.5 * width)
        out = true;
    }
    if (out) box.outliers.push_back(i);
  }
  return box;
}

}  // namespace stgp
