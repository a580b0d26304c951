#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "stgp/rng.hpp"

namespace stgp {

using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr double kJitterBase = 1e-10;
constexpr double kJitterMax = 1e-4;

inline void require_square(const MatrixXd& a, const char* who) {
  if (a.rows() != a.cols()) {
    std::ostringstream os;
    os << who << ": matrix is " << a.rows() << "x" << a.cols() << ", expected square";
    throw std::invalid_argument(os.str());
  }
}

inline double max_asymmetry(const MatrixXd& a) {
  return (a - a.transpose()).cwiseAbs().maxCoeff();
}

// Cholesky of A + jitter*I, doubling the jitter from kJitterBase until the
// factorization succeeds. Throws (with the smallest eigenvalue in the
// message) if kJitterMax is not enough.
struct JitteredLlt {
  Eigen::LLT<MatrixXd> llt;
  double jitter = 0.0;
};

inline JitteredLlt chol_jitter(const MatrixXd& a, double extra_diag = 0.0) {
  require_square(a, "chol_jitter");
  JitteredLlt out;
  MatrixXd work = a;
  if (extra_diag != 0.0) work.diagonal().array() += extra_diag;
  // Try the matrix as given first: a strictly positive extra_diag (e.g. a
  // noise variance) often makes jitter unnecessary.
  if (extra_diag > 0.0) {
    out.llt.compute(work);
    if (out.llt.info() == Eigen::Success) {
      out.jitter = 0.0;
      return out;
    }
  }
  for (double j = kJitterBase; j <= kJitterMax * (1.0 + 1e-12); j *= 2.0) {
    MatrixXd shifted = work;
    shifted.diagonal().array() += j;
    out.llt.compute(shifted);
    if (out.llt.info() == Eigen::Success) {
      out.jitter = j;
      return out;
    }
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(work, Eigen::EigenvaluesOnly);
  std::ostringstream os;
  os << "chol_jitter: matrix not positive definite at max jitter " << kJitterMax
     << " (smallest eigenvalue " << es.eigenvalues().minCoeff() << ")";
  throw std::runtime_error(os.str());
}

inline MatrixXd kron(const MatrixXd& a, const MatrixXd& b) {
  MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

struct SymEig {
  MatrixXd vectors;
  VectorXd values;
};

inline SymEig sym_eig(const MatrixXd& a) {
  require_square(a, "sym_eig");
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(a);
  if (es.info() != Eigen::Success) throw std::runtime_error("sym_eig: eigendecomposition failed");
  return {es.eigenvectors(), es.eigenvalues()};
}

// Solver for (K_unit (x) K_time + sigma2 I) x = v on a full unit-time grid with
// unit-major cell ordering (cell = unit*T + time). Works through the joint
// eigendecomposition, so the cost per apply is two small matrix products
// instead of a dense factorization of the NT x NT system.
class KroneckerSolver {
 public:
  KroneckerSolver(const MatrixXd& k_unit, const MatrixXd& k_time, double sigma2)
      : n_(static_cast<int>(k_unit.rows())),
        t_(static_cast<int>(k_time.rows())),
        eu_(sym_eig(k_unit)),
        et_(sym_eig(k_time)),
        denom_(t_, n_) {
    for (int i = 0; i < n_; ++i)
      for (int s = 0; s < t_; ++s) denom_(s, i) = eu_.values(i) * et_.values(s) + sigma2;
    if (denom_.minCoeff() <= 0.0)
      throw std::runtime_error("KroneckerSolver: system is singular (needs jitter or sigma2 > 0)");
  }

  int size() const { return n_ * t_; }

  VectorXd apply(const VectorXd& v) const {
    if (v.size() != size()) throw std::invalid_argument("KroneckerSolver: size mismatch");
    // vec convention: reshaping v to T x N (column per unit) makes
    // (A (x) B) v = vec(B M A^T).
    Eigen::Map<const MatrixXd> m(v.data(), t_, n_);
    MatrixXd z = et_.vectors.transpose() * m * eu_.vectors;  // (U (x) V)^T v
    z.array() /= denom_.array();
    MatrixXd r = et_.vectors * z * eu_.vectors.transpose();
    return Eigen::Map<VectorXd>(r.data(), size());
  }

  MatrixXd apply(const MatrixXd& rhs) const {
    MatrixXd out(rhs.rows(), rhs.cols());
    for (Eigen::Index j = 0; j < rhs.cols(); ++j) out.col(j) = apply(VectorXd(rhs.col(j)));
    return out;
  }

  double logdet() const { return denom_.array().log().sum(); }

 private:
  int n_, t_;
  SymEig eu_, et_;
  MatrixXd denom_;  // T x N grid of (lambda_i * gamma_s + sigma2)
};

// Draws from N(mu, Sigma) through the eigendecomposition of Sigma; negative
// eigenvalues from roundoff are clamped to zero, so an exactly singular (or
// zero) covariance yields exact draws instead of a factorization failure.
inline MatrixXd mvn_sample(const VectorXd& mu, const MatrixXd& sigma, int n_draws, Rng& rng) {
  require_square(sigma, "mvn_sample");
  if (sigma.rows() != mu.size()) throw std::invalid_argument("mvn_sample: dimension mismatch");
  const SymEig eig = sym_eig(sigma);
  VectorXd scale = eig.values.cwiseMax(0.0).cwiseSqrt();
  MatrixXd draws(n_draws, mu.size());
  VectorXd z(mu.size());
  for (int d = 0; d < n_draws; ++d) {
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = rng.normal() * scale(i);
    draws.row(d) = (mu + eig.vectors * z).transpose();
  }
  return draws;
}

// Empirical quantile with linear interpolation between order statistics
// (R's default type 7). Used for all credible intervals.
inline double quantile(std::vector<double> v, double p) {
  if (v.empty()) throw std::invalid_argument("quantile: empty sample");
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("quantile: p outside [0,1]");
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - std::floor(h)) * (v[hi] - v[lo]);
}

inline double quantile(const VectorXd& v, double p) {
  return quantile(std::vector<double>(v.data(), v.data() + v.size()), p);
}

// log N(r; 0, A) given a (jittered) factorization of A.
inline double mvn_logpdf(const JitteredLlt& chol, const VectorXd& resid) {
  const auto& l = chol.llt.matrixL();
  VectorXd half = l.solve(resid);
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < resid.size(); ++i) logdet += 2.0 * std::log(l(i, i));
  return -0.5 * (half.squaredNorm() + logdet +
                 resid.size() * 1.8378770664093454836);  // log(2*pi)
}

}  // namespace stgp
