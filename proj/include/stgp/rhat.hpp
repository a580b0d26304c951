#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "stgp/rng.hpp"

namespace stgp {

namespace detail {

// Average ranks with ties, 1-based.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

// Classic split-R-hat on already-transformed sequences of equal length.
inline double rhat_of(const std::vector<std::vector<double>>& seqs) {
  const std::size_t m = seqs.size();
  const std::size_t n = seqs[0].size();
  double w = 0.0, grand = 0.0;
  std::vector<double> means(m);
  for (std::size_t c = 0; c < m; ++c) {
    double mu = 0.0;
    for (double v : seqs[c]) mu += v;
    mu /= static_cast<double>(n);
    means[c] = mu;
    grand += mu;
    double s2 = 0.0;
    for (double v : seqs[c]) s2 += (v - mu) * (v - mu);
    w += s2 / static_cast<double>(n - 1);
  }
  w /= static_cast<double>(m);
  grand /= static_cast<double>(m);
  double b_over_n = 0.0;
  for (double mu : means) b_over_n += (mu - grand) * (mu - grand);
  b_over_n /= static_cast<double>(m - 1);
  if (w == 0.0 && b_over_n == 0.0) return 1.0;  // all draws identical
  if (w == 0.0) return std::numeric_limits<double>::infinity();
  const double var_plus =
      (static_cast<double>(n - 1) / static_cast<double>(n)) * w + b_over_n;
  return std::sqrt(var_plus / w);
}

inline double rank_normalized_rhat_of(std::vector<std::vector<double>> seqs) {
  const std::size_t m = seqs.size();
  const std::size_t n = seqs[0].size();
  std::vector<double> pooled;
  pooled.reserve(m * n);
  for (const auto& s : seqs) pooled.insert(pooled.end(), s.begin(), s.end());
  const auto ranks = average_ranks(pooled);
  const double total = static_cast<double>(pooled.size());
  std::size_t k = 0;
  for (auto& s : seqs)
    for (auto& v : s) v = normal_quantile((ranks[k++] - 0.375) / (total + 0.25));
  return rhat_of(seqs);
}

}  // namespace detail

// Rank-normalized split-R-hat: the maximum of the statistic computed on the
// rank-normalized draws (bulk) and on the rank-normalized folded draws
// (|x - median|, tail sensitivity). Values near 1 indicate that the chains
// are sampling the same distribution; >= 1.05 flags non-convergence.
inline double rhat(const std::vector<Eigen::VectorXd>& chains) {
  if (chains.size() < 2) throw std::invalid_argument("rhat: need at least 2 chains");
  const Eigen::Index len = chains[0].size();
  for (const auto& c : chains)
    if (c.size() != len) throw std::invalid_argument("rhat: chains must have equal length");
  if (len < 4) throw std::invalid_argument("rhat: need at least 4 draws per chain");

  const std::size_t half = static_cast<std::size_t>(len) / 2;
  std::vector<std::vector<double>> split;
  for (const auto& c : chains) {
    std::vector<double> a(half), b(half);
    for (std::size_t i = 0; i < half; ++i) {
      a[i] = c(static_cast<Eigen::Index>(i));
      b[i] = c(len - static_cast<Eigen::Index>(half) + static_cast<Eigen::Index>(i));
    }
    split.push_back(std::move(a));
    split.push_back(std::move(b));
  }

  const double bulk = detail::rank_normalized_rhat_of(split);

  std::vector<double> pooled;
  for (const auto& s : split) pooled.insert(pooled.end(), s.begin(), s.end());
  std::vector<double> sorted = pooled;
  std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
  const double med = sorted[sorted.size() / 2];
  auto folded = split;
  for (auto& s : folded)
    for (auto& v : s) v = std::fabs(v - med);
  const double tail = detail::rank_normalized_rhat_of(folded);

  return std::max(bulk, tail);
}

}  // namespace stgp
