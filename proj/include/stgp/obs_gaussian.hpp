#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <vector>

#include "stgp/linalg.hpp"
#include "stgp/panel.hpp"

namespace stgp {

// Operations with A = K_obs + sigma2*I, the marginal covariance of the
// observed cells. Two strategies behind one surface:
//  - dense: jittered Cholesky of the assembled obs block;
//  - separable: for K = K_unit (x) K_time on the full grid, works from the
//    joint eigendecomposition and corrects for the removed (mis) cells
//    through the (M^-1)_mis,mis block, avoiding any NT-sized factorization.
// The separable route also exposes the Schur complement of the mis block,
// which is exactly the predictive covariance K_mis + sigma2*I - K_mo A^-1 K_om.
class ObsGaussian {
 public:
  static ObsGaussian dense(const MatrixXd& k_obs, double sigma2) {
    ObsGaussian og;
    og.sigma2_ = sigma2;
    og.n_ = static_cast<int>(k_obs.rows());
    og.dense_chol_ = chol_jitter(k_obs, sigma2);
    og.logdet_ = 0.0;
    const auto& l = og.dense_chol_.llt.matrixL();
    for (int i = 0; i < og.n_; ++i) og.logdet_ += 2.0 * std::log(l(i, i));
    return og;
  }

  static ObsGaussian separable(const MatrixXd& k_unit, const MatrixXd& k_time, double sigma2,
                               const std::vector<CellId>& obs, const std::vector<CellId>& mis,
                               int n_times) {
    ObsGaussian og;
    og.sigma2_ = sigma2;
    og.n_ = static_cast<int>(obs.size());
    og.n_units_ = static_cast<int>(k_unit.rows());
    og.n_times_ = n_times;
    og.obs_flat_.reserve(obs.size());
    for (const auto& c : obs) og.obs_flat_.push_back(c.unit * n_times + c.time);
    og.mis_flat_.reserve(mis.size());
    for (const auto& c : mis) og.mis_flat_.push_back(c.unit * n_times + c.time);

    // Jitter on sigma2 if the grid system would be singular (e.g. a
    // rank-deficient ICM unit factor with sigma2 = 0).
    const SymEig eu = sym_eig(k_unit);
    const SymEig et = sym_eig(k_time);
    double min_lg = std::numeric_limits<double>::infinity();
    for (int i = 0; i < og.n_units_; ++i)
      for (int s = 0; s < n_times; ++s) min_lg = std::min(min_lg, eu.values(i) * et.values(s));
    double jitter = 0.0;
    if (min_lg + sigma2 <= 0.0) {
      for (jitter = kJitterBase; min_lg + sigma2 + jitter <= 0.0; jitter *= 2.0) {
        if (jitter > kJitterMax)
          throw std::runtime_error("ObsGaussian: separable system singular at max jitter");
      }
    }
    og.solver_ = std::make_unique<KroneckerSolver>(k_unit, k_time, sigma2 + jitter);
    og.jitter_ = jitter;

    const int m = static_cast<int>(mis.size());
    og.w_ = MatrixXd::Zero(og.n_units_ * n_times, m);
    VectorXd e = VectorXd::Zero(og.n_units_ * n_times);
    for (int c = 0; c < m; ++c) {
      e(og.mis_flat_[c]) = 1.0;
      og.w_.col(c) = og.solver_->apply(e);
      e(og.mis_flat_[c]) = 0.0;
    }
    MatrixXd cc(m, m);
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < m; ++c) cc(r, c) = og.w_(og.mis_flat_[r], c);
    cc = 0.5 * (cc + cc.transpose()).eval();
    og.cc_chol_ = chol_jitter(cc);
    og.logdet_ = og.solver_->logdet();
    {
      const auto& l = og.cc_chol_.llt.matrixL();
      for (int i = 0; i < m; ++i) og.logdet_ += 2.0 * std::log(l(i, i));
    }
    // S = inv((M^-1)_CC), the predictive covariance of the mis block.
    og.schur_ = og.cc_chol_.llt.solve(MatrixXd::Identity(m, m));
    og.schur_ = 0.5 * (og.schur_ + og.schur_.transpose()).eval();
    return og;
  }

  int size() const { return n_; }
  double sigma2() const { return sigma2_; }
  double logdet() const { return logdet_; }
  bool is_separable() const { return solver_ != nullptr; }

  VectorXd solve(const VectorXd& r) const {
    if (r.size() != n_) throw std::invalid_argument("ObsGaussian::solve: size mismatch");
    if (!solver_) return dense_chol_.llt.solve(r);
    VectorXd padded = VectorXd::Zero(n_units_ * n_times_);
    for (int i = 0; i < n_; ++i) padded(obs_flat_[i]) = r(i);
    VectorXd q = solver_->apply(padded);
    VectorXd qc(mis_flat_.size());
    for (std::size_t c = 0; c < mis_flat_.size(); ++c) qc(c) = q(mis_flat_[c]);
    VectorXd x_full = q - w_ * cc_chol_.llt.solve(qc);
    VectorXd out(n_);
    for (int i = 0; i < n_; ++i) out(i) = x_full(obs_flat_[i]);
    return out;
  }

  MatrixXd solve(const MatrixXd& rhs) const {
    MatrixXd out(rhs.rows(), rhs.cols());
    for (Eigen::Index j = 0; j < rhs.cols(); ++j) out.col(j) = solve(VectorXd(rhs.col(j)));
    return out;
  }

  // log N(resid; 0, A)
  double loglik(const VectorXd& resid) const {
    const VectorXd x = solve(resid);
    return -0.5 * (resid.dot(x) + logdet_ + n_ * 1.8378770664093454836);
  }

  // Separable-only shortcuts for the mis block.
  const MatrixXd& schur_mis() const {
    if (!solver_) throw std::logic_error("ObsGaussian: schur_mis needs the separable strategy");
    return schur_;
  }

  // K_mis,obs A^-1 r, computed as -S W_A^T r.
  VectorXd predictive_mean(const VectorXd& resid) const {
    if (!solver_) throw std::logic_error("ObsGaussian: predictive_mean needs the separable strategy");
    VectorXd padded = VectorXd::Zero(n_units_ * n_times_);
    for (int i = 0; i < n_; ++i) padded(obs_flat_[i]) = resid(i);
    return -(schur_ * (w_.transpose() * padded));
  }

  // K_mis,obs A^-1 R for matrix R over obs cells (columns are RHS).
  MatrixXd predictive_mean(const MatrixXd& resid) const {
    MatrixXd out(schur_.rows(), resid.cols());
    for (Eigen::Index j = 0; j < resid.cols(); ++j)
      out.col(j) = predictive_mean(VectorXd(resid.col(j)));
    return out;
  }

 private:
  int n_ = 0;
  double sigma2_ = 0.0;
  double jitter_ = 0.0;
  double logdet_ = 0.0;
  // dense strategy
  JitteredLlt dense_chol_;
  // separable strategy
  int n_units_ = 0, n_times_ = 0;
  std::unique_ptr<KroneckerSolver> solver_;
  std::vector<int> obs_flat_, mis_flat_;
  MatrixXd w_;      // (NT) x m, columns M^-1 e_c
  JitteredLlt cc_chol_;
  MatrixXd schur_;  // m x m
};

}  // namespace stgp
