#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "stgp/linalg.hpp"
#include "stgp/panel.hpp"

namespace stgp {

constexpr double kExponentEdge = 1e-12;  // closed-interval stand-in for the open endpoint

// Low-rank coregionalization across units (K_unit = Phi Phi^T) with an RBF
// kernel in time. `phi` may be empty when the factors are to be learned;
// `tau2` is only the scale used when factor rows are drawn for a simulation.
struct IcmRbfParams {
  double l_t = 1.0;
  int rank_j = 1;
  MatrixXd phi;      // N x J, possibly empty (learned)
  double tau2 = 1.0;
};

struct RbfRbfParams {
  double tau2 = 1.0;
  double l_s = 1.0;
  double l_t = 1.0;
};

struct GneitingParams {
  double tau2 = 1.0;
  double l_s = 1.0;
  double l_t = 1.0;
  double alpha = 1.0;  // temporal smoothness, (0, 1]
  double gamma = 1.0;  // spatial smoothness, (0, 1]
  double eta = 0.5;    // space-time interaction, [0, 1]
};

using KernelParams = std::variant<IcmRbfParams, RbfRbfParams, GneitingParams>;

enum class KernelFamily { icm_rbf, rbf_rbf, gneiting };

inline KernelFamily family(const KernelParams& p) {
  if (std::holds_alternative<IcmRbfParams>(p)) return KernelFamily::icm_rbf;
  if (std::holds_alternative<RbfRbfParams>(p)) return KernelFamily::rbf_rbf;
  return KernelFamily::gneiting;
}

inline std::string family_name(KernelFamily f) {
  switch (f) {
    case KernelFamily::icm_rbf: return "icm_rbf";
    case KernelFamily::rbf_rbf: return "rbf_rbf";
    case KernelFamily::gneiting: return "gneiting";
  }
  return "?";
}

inline bool is_separable(KernelFamily f) { return f != KernelFamily::gneiting; }

inline void validate(const KernelParams& params) {
  std::visit(
      [](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if (p.l_t <= 0.0) throw std::invalid_argument("kernel: l_t must be positive");
        if constexpr (std::is_same_v<T, IcmRbfParams>) {
          if (p.rank_j < 1) throw std::invalid_argument("kernel: rank_j must be >= 1");
          if (p.phi.size() > 0) {
            if (p.phi.cols() != p.rank_j)
              throw std::invalid_argument("kernel: phi must have rank_j columns");
            if (!p.phi.allFinite()) throw std::invalid_argument("kernel: phi must be finite");
          }
        } else {
          if (p.tau2 <= 0.0) throw std::invalid_argument("kernel: tau2 must be positive");
          if (p.l_s <= 0.0) throw std::invalid_argument("kernel: l_s must be positive");
        }
        if constexpr (std::is_same_v<T, GneitingParams>) {
          if (p.alpha < kExponentEdge || p.alpha > 1.0)
            throw std::invalid_argument("kernel: alpha must lie in (0, 1]");
          if (p.gamma < kExponentEdge || p.gamma > 1.0)
            throw std::invalid_argument("kernel: gamma must lie in (0, 1]");
          if (p.eta < 0.0 || p.eta > 1.0)
            throw std::invalid_argument("kernel: eta must lie in [0, 1]");
        }
      },
      params);
}

// --- scalar kernels ---------------------------------------------------------

inline double k_time_rbf(double t, double tp, double l_t) {
  const double d = t - tp;
  return std::exp(-d * d / (2.0 * l_t * l_t));
}

inline double k_unit_rbf(const Eigen::Vector2d& s, const Eigen::Vector2d& sp, double l_s) {
  const double d2 = (s - sp).squaredNorm();
  return std::exp(-d2 / (2.0 * l_s * l_s));
}

inline double k_unit_icm(int i, int ip, const MatrixXd& phi) {
  return phi.row(i).dot(phi.row(ip));
}

// Gneiting covariance as a function of squared spatial distance h2 and
// squared temporal lag u2:
//   psi = (1/l_t) * u2^alpha + 1
//   k   = tau2 * psi^-eta * exp(-((1/l_s) * h2^gamma) / psi^(eta*gamma))
inline double k_gneiting_h2u2(double h2, double u2, const GneitingParams& p) {
  const double psi = (u2 > 0.0 ? std::pow(u2, p.alpha) / p.l_t : 0.0) + 1.0;
  const double spatial = h2 > 0.0 ? std::pow(h2, p.gamma) / p.l_s : 0.0;
  const double damp = p.eta > 0.0 ? std::pow(psi, p.eta) : 1.0;
  const double damp_g = p.eta > 0.0 ? std::pow(psi, p.eta * p.gamma) : 1.0;
  return p.tau2 / damp * std::exp(-spatial / damp_g);
}

inline double k_gneiting(const Eigen::Vector2d& s, const Eigen::Vector2d& sp, double t, double tp,
                         const GneitingParams& p) {
  const double dt = t - tp;
  return k_gneiting_h2u2((s - sp).squaredNorm(), dt * dt, p);
}

// --- assembled covariances --------------------------------------------------

struct CovMatrix {
  MatrixXd dense;                    // empty when only the factor pair is held
  std::optional<MatrixXd> k_unit;    // separable factors over the full grid
  std::optional<MatrixXd> k_time;
  double jitter = 0.0;

  bool has_kron() const { return k_unit.has_value(); }
  MatrixXd materialize() const {
    if (dense.size() > 0) return dense;
    if (!has_kron()) throw std::logic_error("CovMatrix: empty");
    return kron(*k_unit, *k_time);
  }
};

// Unit-level covariance matrix (N x N).
inline MatrixXd unit_covariance(const PanelData& panel, const KernelParams& params) {
  const int n = panel.n_units;
  return std::visit(
      [&](const auto& p) -> MatrixXd {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, IcmRbfParams>) {
          if (p.phi.rows() != n)
            throw std::invalid_argument("kernel: phi must have one row per unit");
          return p.phi * p.phi.transpose();
        } else if constexpr (std::is_same_v<T, RbfRbfParams>) {
          MatrixXd k(n, n);
          for (int i = 0; i < n; ++i)
            for (int j = 0; j <= i; ++j) {
              const double v =
                  p.tau2 * k_unit_rbf(panel.coords.row(i), panel.coords.row(j), p.l_s);
              k(i, j) = v;
              k(j, i) = v;
            }
          return k;
        } else {
          throw std::invalid_argument("unit_covariance: Gneiting kernel is not separable");
        }
      },
      params);
}

// Time-level covariance matrix (T x T); the RBF-RBF variance tau2 lives on
// the unit factor so that kron(K_unit, K_time) carries it exactly once.
inline MatrixXd time_covariance(const PanelData& panel, const KernelParams& params) {
  const int t = panel.n_times;
  const double l_t = std::visit([](const auto& p) { return p.l_t; }, params);
  if (family(params) == KernelFamily::gneiting)
    throw std::invalid_argument("time_covariance: Gneiting kernel is not separable");
  MatrixXd k(t, t);
  for (int a = 0; a < t; ++a)
    for (int b = 0; b <= a; ++b) {
      const double v = k_time_rbf(panel.time_values(a), panel.time_values(b), l_t);
      k(a, b) = v;
      k(b, a) = v;
    }
  return k;
}

namespace detail {

// Deduplicated evaluation grid: kernels depend on cells only through the
// squared spatial distance and squared time lag, and panels (especially
// grids) repeat few distinct values of each.
struct PairLookup {
  std::vector<int> unit_code;  // N*N -> distinct h2 index
  std::vector<int> time_code;  // T*T -> distinct u2 index
  std::vector<double> h2;
  std::vector<double> u2;
  int n = 0, t = 0;

  static PairLookup build(const PanelData& panel) {
    PairLookup lk;
    lk.n = panel.n_units;
    lk.t = panel.n_times;
    lk.unit_code.resize(static_cast<std::size_t>(lk.n) * lk.n);
    lk.time_code.resize(static_cast<std::size_t>(lk.t) * lk.t);
    std::map<double, int> h2_idx, u2_idx;
    for (int i = 0; i < lk.n; ++i)
      for (int j = 0; j < lk.n; ++j) {
        const double h2 = (panel.coords.row(i) - panel.coords.row(j)).squaredNorm();
        auto [it, fresh] = h2_idx.emplace(h2, static_cast<int>(lk.h2.size()));
        if (fresh) lk.h2.push_back(h2);
        lk.unit_code[static_cast<std::size_t>(i) * lk.n + j] = it->second;
      }
    for (int a = 0; a < lk.t; ++a)
      for (int b = 0; b < lk.t; ++b) {
        const double du = panel.time_values(a) - panel.time_values(b);
        auto [it, fresh] = u2_idx.emplace(du * du, static_cast<int>(lk.u2.size()));
        if (fresh) lk.u2.push_back(du * du);
        lk.time_code[static_cast<std::size_t>(a) * lk.t + b] = it->second;
      }
    return lk;
  }
};

inline MatrixXd gneiting_table(const PairLookup& lk, const GneitingParams& p) {
  MatrixXd table(lk.h2.size(), lk.u2.size());
  for (std::size_t a = 0; a < lk.h2.size(); ++a)
    for (std::size_t b = 0; b < lk.u2.size(); ++b)
      table(a, b) = k_gneiting_h2u2(lk.h2[a], lk.u2[b], p);
  return table;
}

}  // namespace detail

// Caches panel geometry (pairwise distances/lags deduplicated) so repeated
// assemblies at new parameter values only re-evaluate the kernel on the
// distinct (h2, u2) grid. This is what samplers hit thousands of times.
class KernelEvaluator {
 public:
  explicit KernelEvaluator(const PanelData& panel)
      : panel_(&panel), lk_(detail::PairLookup::build(panel)) {}

  const PanelData& panel() const { return *panel_; }

  MatrixXd cross(const KernelParams& params, const std::vector<CellId>& rows,
                 const std::vector<CellId>& cols) const {
    validate(params);
    MatrixXd out(rows.size(), cols.size());
    if (family(params) == KernelFamily::gneiting) {
      const MatrixXd table = detail::gneiting_table(lk_, std::get<GneitingParams>(params));
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < cols.size(); ++c)
          out(r, c) =
              table(lk_.unit_code[static_cast<std::size_t>(rows[r].unit) * lk_.n + cols[c].unit],
                    lk_.time_code[static_cast<std::size_t>(rows[r].time) * lk_.t + cols[c].time]);
    } else {
      const MatrixXd ku = unit_covariance(*panel_, params);
      const MatrixXd kt = time_covariance(*panel_, params);
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < cols.size(); ++c)
          out(r, c) = ku(rows[r].unit, cols[c].unit) * kt(rows[r].time, cols[c].time);
    }
    if (!out.allFinite()) throw std::runtime_error("cross_covariance: non-finite kernel value");
    return out;
  }

 private:
  const PanelData* panel_;
  detail::PairLookup lk_;
};

// Covariance between two cell lists, k((i,t),(i',t')) entrywise.
inline MatrixXd cross_covariance(const PanelData& panel, const KernelParams& params,
                                 const std::vector<CellId>& rows,
                                 const std::vector<CellId>& cols) {
  return KernelEvaluator(panel).cross(params, rows, cols);
}

// Symmetric covariance over one cell list.
inline CovMatrix assemble(const PanelData& panel, const KernelParams& params,
                          const std::vector<CellId>& cells) {
  CovMatrix cov;
  cov.dense = cross_covariance(panel, params, cells, cells);
  cov.dense = 0.5 * (cov.dense + cov.dense.transpose()).eval();
  return cov;
}

// Full-grid covariance; separable families return the Kronecker pair.
inline CovMatrix assemble_full(const PanelData& panel, const KernelParams& params) {
  validate(params);
  CovMatrix cov;
  if (is_separable(family(params))) {
    cov.k_unit = unit_covariance(panel, params);
    cov.k_time = time_covariance(panel, params);
  } else {
    std::vector<CellId> cells;
    cells.reserve(panel.n_cells());
    for (int i = 0; i < panel.n_units; ++i)
      for (int t = 0; t < panel.n_times; ++t) cells.push_back({i, t});
    cov = assemble(panel, params, cells);
  }
  return cov;
}

// Adds the smallest diagonal jitter (doubling ladder from 1e-10 to 1e-4)
// that makes the matrix factorizable; records the jitter used.
inline CovMatrix ensure_psd(const CovMatrix& cov) {
  if (cov.dense.size() == 0)
    throw std::invalid_argument("ensure_psd: dense covariance required");
  if (max_asymmetry(cov.dense) > 1e-12)
    throw std::invalid_argument("ensure_psd: input matrix is not symmetric");
  CovMatrix out = cov;
  for (double j = kJitterBase; j <= kJitterMax * (1.0 + 1e-12); j *= 2.0) {
    MatrixXd shifted = cov.dense;
    shifted.diagonal().array() += j;
    Eigen::LLT<MatrixXd> llt(shifted);
    if (llt.info() == Eigen::Success) {
      out.dense = shifted;
      out.jitter = j;
      return out;
    }
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(cov.dense, Eigen::EigenvaluesOnly);
  std::ostringstream os;
  os << "ensure_psd: not positive semidefinite at max jitter " << kJitterMax
     << " (smallest eigenvalue " << es.eigenvalues().minCoeff() << ")";
  throw std::runtime_error(os.str());
}

}  // namespace stgp
