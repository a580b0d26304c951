#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <variant>

#include "stgp/kernels.hpp"
#include "stgp/rng.hpp"

namespace stgp {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// One-parameter prior. Support violations evaluate to -inf rather than throw,
// so samplers can treat the prior as part of the target density.
struct InvGammaPrior { double shape, scale; };
struct UniformPrior { double lo, hi; };
struct NormalPrior { double mean, sd; };
// Normal restricted to [lo, hi]; used both for the eta prior (N(0.5, 0.1) on
// [0,1]) and for scale parameters whose stated Normal priors are truncated
// at zero to keep them in support.
struct TruncNormalPrior { double mean, sd, lo, hi; };
struct BetaPrior { double a, b; };
struct FlatPrior {};

using Prior = std::variant<InvGammaPrior, UniformPrior, NormalPrior, TruncNormalPrior, BetaPrior,
                           FlatPrior>;

inline double log_pdf(const Prior& prior, double x) {
  return std::visit(
      [&](const auto& p) -> double {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, InvGammaPrior>) {
          if (x <= 0.0) return kNegInf;
          return p.shape * std::log(p.scale) - std::lgamma(p.shape) -
                 (p.shape + 1.0) * std::log(x) - p.scale / x;
        } else if constexpr (std::is_same_v<T, UniformPrior>) {
          if (x < p.lo || x > p.hi) return kNegInf;
          return -std::log(p.hi - p.lo);
        } else if constexpr (std::is_same_v<T, NormalPrior>) {
          const double z = (x - p.mean) / p.sd;
          return -0.5 * z * z - std::log(p.sd) - 0.91893853320467274178;
        } else if constexpr (std::is_same_v<T, TruncNormalPrior>) {
          if (x < p.lo || x > p.hi) return kNegInf;
          const double z = (x - p.mean) / p.sd;
          const double mass = normal_cdf((p.hi - p.mean) / p.sd) -
                              normal_cdf((p.lo - p.mean) / p.sd);
          return -0.5 * z * z - std::log(p.sd) - 0.91893853320467274178 - std::log(mass);
        } else if constexpr (std::is_same_v<T, BetaPrior>) {
          if (x <= 0.0 || x >= 1.0) return kNegInf;
          return std::lgamma(p.a + p.b) - std::lgamma(p.a) - std::lgamma(p.b) +
                 (p.a - 1.0) * std::log(x) + (p.b - 1.0) * std::log(1.0 - x);
        } else {
          return 0.0;  // flat
        }
      },
      prior);
}

inline bool is_flat(const Prior& prior) { return std::holds_alternative<FlatPrior>(prior); }

inline double sample(const Prior& prior, Rng& rng) {
  return std::visit(
      [&](const auto& p) -> double {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, InvGammaPrior>) {
          return rng.inv_gamma(p.shape, p.scale);
        } else if constexpr (std::is_same_v<T, UniformPrior>) {
          return rng.uniform(p.lo, p.hi);
        } else if constexpr (std::is_same_v<T, NormalPrior>) {
          return rng.normal(p.mean, p.sd);
        } else if constexpr (std::is_same_v<T, TruncNormalPrior>) {
          return rng.trunc_normal(p.mean, p.sd, p.lo, p.hi);
        } else if constexpr (std::is_same_v<T, BetaPrior>) {
          return rng.beta(p.a, p.b);
        } else {
          throw std::invalid_argument("cannot sample from a flat prior");
        }
      },
      prior);
}

// Median (used to initialize samplers). Computed by bisection on the CDF for
// the inverse-gamma; closed forms elsewhere.
inline double median(const Prior& prior) {
  return std::visit(
      [&](const auto& p) -> double {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, InvGammaPrior>) {
          // median of InvGamma(a,b) = b / median(Gamma(a,1)); bisect the
          // regularized incomplete gamma via its series/continued fraction is
          // overkill here, a simple bisection on the gamma CDF suffices.
          auto gamma_cdf = [&](double x) {
            // lower regularized incomplete gamma P(a, x) by series.
            if (x <= 0.0) return 0.0;
            double sum = 1.0 / p.shape, term = sum;
            for (int k = 1; k < 500; ++k) {
              term *= x / (p.shape + k);
              sum += term;
              if (term < 1e-16 * sum) break;
            }
            return std::exp(p.shape * std::log(x) - x - std::lgamma(p.shape)) * sum;
          };
          double lo = 1e-12, hi = p.shape + 10.0 * std::sqrt(p.shape) + 10.0;
          for (int it = 0; it < 200; ++it) {
            const double mid = 0.5 * (lo + hi);
            (gamma_cdf(mid) < 0.5 ? lo : hi) = mid;
          }
          return p.scale / (0.5 * (lo + hi));
        } else if constexpr (std::is_same_v<T, UniformPrior>) {
          return 0.5 * (p.lo + p.hi);
        } else if constexpr (std::is_same_v<T, NormalPrior>) {
          return p.mean;
        } else if constexpr (std::is_same_v<T, TruncNormalPrior>) {
          const double plo = normal_cdf((p.lo - p.mean) / p.sd);
          const double phi = normal_cdf((p.hi - p.mean) / p.sd);
          return p.mean + p.sd * normal_quantile(0.5 * (plo + phi));
        } else if constexpr (std::is_same_v<T, BetaPrior>) {
          if (p.a == 1.0 && p.b == 1.0) return 0.5;
          // crude bisection on the regularized incomplete beta via sampling-free
          // continued fraction would be heavy; (a-1/3)/(a+b-2/3) is the usual
          // approximation and is only used for initialization.
          return (p.a - 1.0 / 3.0) / (p.a + p.b - 2.0 / 3.0);
        } else {
          throw std::invalid_argument("flat prior has no median");
        }
      },
      prior);
}

using PriorSpec = std::map<std::string, Prior>;

// Simulation-model defaults: InvGamma(5,5) scales, Unif(0,1) exponents,
// N(0.5, 0.1) interaction truncated to [0,1], flat intercept, standard-normal
// coregionalization factors and unit effects.
inline PriorSpec simulation_priors() {
  PriorSpec s;
  s["tau2"] = InvGammaPrior{5.0, 5.0};
  s["sigma2"] = InvGammaPrior{5.0, 5.0};
  s["l_t"] = InvGammaPrior{5.0, 5.0};
  s["l_s"] = InvGammaPrior{5.0, 5.0};
  s["alpha"] = UniformPrior{0.0, 1.0};
  s["gamma"] = UniformPrior{0.0, 1.0};
  s["eta"] = TruncNormalPrior{0.5, 0.1, 0.0, 1.0};
  s["mu0"] = FlatPrior{};
  s["beta"] = FlatPrior{};
  s["delta"] = NormalPrior{0.0, 1.0};
  s["phi"] = NormalPrior{0.0, 1.0};
  return s;
}

// Application-model defaults (county panels: distances in miles, two-week
// periods). Normal priors on scales are truncated at zero.
inline PriorSpec application_priors(KernelFamily fam) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  PriorSpec s;
  s["l_t"] = TruncNormalPrior{10.0, 5.0, 0.0, inf};
  s["l_s"] = TruncNormalPrior{300.0, 100.0, 0.0, inf};
  s["sigma2"] = InvGammaPrior{5.0, 5.0};
  s["beta"] = FlatPrior{};
  s["phi"] = NormalPrior{0.0, 1.0};
  switch (fam) {
    case KernelFamily::gneiting:
      s["tau2"] = TruncNormalPrior{0.0, 1.0, 0.0, inf};
      s["mu0"] = NormalPrior{0.0, 1.0};
      s["alpha"] = BetaPrior{1.0, 1.0};
      s["gamma"] = BetaPrior{1.0, 1.0};
      s["eta"] = BetaPrior{1.0, 1.0};
      s["delta"] = FlatPrior{};
      break;
    case KernelFamily::rbf_rbf:
      s["tau2"] = TruncNormalPrior{0.0, 1.0, 0.0, inf};
      s["mu0"] = FlatPrior{};
      s["delta"] = FlatPrior{};
      break;
    case KernelFamily::icm_rbf:
      s["tau2"] = InvGammaPrior{5.0, 5.0};
      s["mu0"] = FlatPrior{};
      s["delta"] = NormalPrior{0.0, 1.0};
      break;
  }
  return s;
}

inline const Prior& prior_for(const PriorSpec& spec, const std::string& name) {
  auto it = spec.find(name);
  if (it == spec.end()) throw std::invalid_argument("no prior configured for '" + name + "'");
  return it->second;
}

}  // namespace stgp
