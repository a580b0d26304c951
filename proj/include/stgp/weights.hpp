#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include "stgp/kernels.hpp"
#include "stgp/linalg.hpp"
#include "stgp/panel.hpp"

namespace stgp {

// Donor-weight representation of GP predictions:
//   W = K_mis,obs (K_obs + sigma2 I)^-1,  Yhat_mis = W y_obs (+ mean terms).
// Rows follow the mis index, columns the obs index; treated post-treatment
// cells are never donors because they are not in the obs index.
struct DonorWeights {
  MatrixXd w;  // |mis| x |obs|
  std::vector<CellId> targets;
  std::vector<CellId> donors;
};

inline DonorWeights donor_weights(const MatrixXd& k_mis_obs, const MatrixXd& k_obs, double sigma2,
                                  std::vector<CellId> targets = {},
                                  std::vector<CellId> donors = {}) {
  if (k_mis_obs.cols() != k_obs.rows())
    throw std::invalid_argument("donor_weights: blocks are not conformable");
  const JitteredLlt chol = chol_jitter(k_obs, sigma2);
  DonorWeights dw;
  dw.w = chol.llt.solve(k_mis_obs.transpose()).transpose();
  dw.targets = std::move(targets);
  dw.donors = std::move(donors);
  return dw;
}

// Kriging predictor K_mis,obs (K_obs + sigma2 I)^-1 y_obs; identical to the
// posterior-predictive mean of the GP under matched covariances.
inline VectorXd kriging_predict(const MatrixXd& k_mis_obs, const MatrixXd& k_obs, double sigma2,
                                const VectorXd& y_obs) {
  if (k_obs.rows() != y_obs.size())
    throw std::invalid_argument("kriging_predict: observation length mismatch");
  const JitteredLlt chol = chol_jitter(k_obs, sigma2);
  return k_mis_obs * chol.llt.solve(y_obs);
}

// Full-grid weight row for one target cell under a separable kernel,
// computed by the Kronecker eigen fast path, together with the
// unit (x) time decomposition. The decomposition is reported descriptively:
// it is the nearest rank-one representation of the exact row (exact when
// sigma2 = 0, where (A (x) B)^-1 (a (x) b) = A^-1 a (x) B^-1 b), and
// `max_outer_dev` records how far the outer product is from the exact row.
struct SeparableWeights {
  VectorXd full_row;   // length N*T, unit-major
  VectorXd w_unit;     // length N
  VectorXd w_time;     // length T
  double max_outer_dev = 0.0;
  bool decomposition_exact = false;
};

inline SeparableWeights donor_weights_separable(const MatrixXd& k_unit, const MatrixXd& k_time,
                                                double sigma2, int target_unit, int target_time) {
  const int n = static_cast<int>(k_unit.rows());
  const int t = static_cast<int>(k_time.rows());
  if (target_unit < 0 || target_unit >= n || target_time < 0 || target_time >= t)
    throw std::invalid_argument("donor_weights_separable: target outside the grid");

  // (K_unit (x) K_time + sigma2 I)^-1 (k_unit(i,.) (x) k_time(t,.)); jitter
  // only if the noiseless system is singular, so the sigma2 = 0 rank-one
  // algebra stays exact.
  double jitter = 0.0;
  std::unique_ptr<KroneckerSolver> solver;
  for (;;) {
    try {
      solver = std::make_unique<KroneckerSolver>(k_unit, k_time, sigma2 + jitter);
      break;
    } catch (const std::runtime_error&) {
      jitter = jitter == 0.0 ? kJitterBase : jitter * 2.0;
      if (jitter > kJitterMax) throw;
    }
  }
  const VectorXd ku_col = k_unit.col(target_unit);
  const VectorXd kt_col = k_time.col(target_time);
  VectorXd rhs(n * t);
  for (int i = 0; i < n; ++i)
    for (int s = 0; s < t; ++s) rhs(i * t + s) = ku_col(i) * kt_col(s);

  SeparableWeights sw;
  sw.full_row = solver->apply(rhs);

  // nearest rank-one factors via the dominant singular pair of the T x N
  // reshape (split the singular value evenly).
  Eigen::Map<const MatrixXd> grid(sw.full_row.data(), t, n);
  Eigen::JacobiSVD<MatrixXd> svd(grid, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const double s0 = svd.singularValues()(0);
  sw.w_time = std::sqrt(s0) * svd.matrixU().col(0);
  sw.w_unit = std::sqrt(s0) * svd.matrixV().col(0);
  // fix sign so the target's own weight is nonnegative
  if (sw.w_unit(target_unit) < 0.0) {
    sw.w_unit = -sw.w_unit;
    sw.w_time = -sw.w_time;
  }
  MatrixXd outer = sw.w_time * sw.w_unit.transpose();
  sw.max_outer_dev = (grid - outer).cwiseAbs().maxCoeff();
  sw.decomposition_exact = sw.max_outer_dev < 1e-10 * std::max(1.0, grid.cwiseAbs().maxCoeff());
  return sw;
}

// Map summaries for plotting: per-target weights averaged over donor times
// (spatial maps) and, per target, the full donor unit x donor time grid.
// Cells outside the donor set (treated post-treatment) carry weight zero.
struct WeightSummaries {
  MatrixXd spatial_avg;                // |targets| x N, mean weight over donor times
  std::vector<MatrixXd> donor_grids;   // per target: N x T weights (zeros at non-donors)
};

inline WeightSummaries weight_summaries(const DonorWeights& dw, const PanelData& panel) {
  if (dw.targets.empty() || dw.donors.empty())
    throw std::invalid_argument("weight_summaries: donor weights carry no cell labels");
  WeightSummaries ws;
  ws.spatial_avg = MatrixXd::Zero(dw.targets.size(), panel.n_units);
  for (std::size_t r = 0; r < dw.targets.size(); ++r) {
    MatrixXd grid = MatrixXd::Zero(panel.n_units, panel.n_times);
    for (std::size_t c = 0; c < dw.donors.size(); ++c)
      grid(dw.donors[c].unit, dw.donors[c].time) = dw.w(static_cast<Eigen::Index>(r),
                                                        static_cast<Eigen::Index>(c));
    ws.spatial_avg.row(static_cast<Eigen::Index>(r)) =
        grid.rowwise().mean().transpose();  // zeros at excluded cells included in the mean
    ws.donor_grids.push_back(std::move(grid));
  }
  return ws;
}

// Spearman rank correlation; used to summarize how weight magnitude relates
// to spatial distance in the map summaries.
inline double spearman(const VectorXd& a, const VectorXd& b) {
  if (a.size() != b.size() || a.size() < 3)
    throw std::invalid_argument("spearman: need two equal samples of size >= 3");
  auto ranks = [](const VectorXd& v) {
    const std::size_t n = static_cast<std::size_t>(v.size());
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      return v(static_cast<Eigen::Index>(x)) < v(static_cast<Eigen::Index>(y));
    });
    VectorXd r(v.size());
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v(static_cast<Eigen::Index>(order[j + 1])) ==
                              v(static_cast<Eigen::Index>(order[i])))
        ++j;
      const double avg = 0.5 * (i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r(static_cast<Eigen::Index>(order[k])) = avg;
      i = j + 1;
    }
    return r;
  };
  const VectorXd ra = ranks(a), rb = ranks(b);
  const double ma = ra.mean(), mb = rb.mean();
  const double cov = ((ra.array() - ma) * (rb.array() - mb)).sum();
  const double sa = std::sqrt((ra.array() - ma).square().sum());
  const double sb = std::sqrt((rb.array() - mb).square().sum());
  if (sa == 0.0 || sb == 0.0) return 0.0;
  return cov / (sa * sb);
}

}  // namespace stgp
