#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stgp/io.hpp"

namespace stgp {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct CellId {
  int unit;  // 0-based
  int time;  // 0-based
  friend bool operator==(const CellId&, const CellId&) = default;
};

// N x T outcome panel with block treatment adoption: treated units switch on
// at the common period t_star (1-based) and stay treated through T. All
// vectorized quantities over cells use unit-major, time-minor order
// (cell = unit*T + time); file formats record the same convention.
struct PanelData {
  int n_units = 0;
  int n_times = 0;
  int t_star = 0;  // 1-based first treated period
  MatrixXd y;      // N x T
  std::vector<std::uint8_t> treated;  // per unit (D_i)
  MatrixXd coords;                    // N x 2, (lon, lat)
  MatrixXd offset;                    // N x T, strictly positive
  MatrixXd covariates;                // (N*T) x p, cell-major; p may be 0
  bool unit_fixed_effects = false;
  std::vector<std::string> unit_labels;  // original unit ids
  VectorXd time_values;                  // real time stamps, default 1..T

  int n_treated() const {
    int n1 = 0;
    for (auto d : treated) n1 += d ? 1 : 0;
    return n1;
  }
  int t0() const { return t_star - 1; }  // pre-treatment period count
  int n_cells() const { return n_units * n_times; }
  int cell_index(int unit, int time) const { return unit * n_times + time; }
  bool is_treated_cell(int unit, int time) const {
    return treated[static_cast<std::size_t>(unit)] != 0 && (time + 1) >= t_star;
  }

  void validate() const {
    if (n_units < 2) throw std::invalid_argument("panel: need at least 2 units");
    if (n_times < 1) throw std::invalid_argument("panel: need at least 1 time period");
    if (y.rows() != n_units || y.cols() != n_times)
      throw std::invalid_argument("panel: outcome matrix shape mismatch");
    if (static_cast<int>(treated.size()) != n_units)
      throw std::invalid_argument("panel: treated flag per unit required");
    if (coords.rows() != n_units || coords.cols() != 2)
      throw std::invalid_argument("panel: coords must be N x 2");
    if (offset.rows() != n_units || offset.cols() != n_times)
      throw std::invalid_argument("panel: offset shape mismatch");
    if ((offset.array() <= 0.0).any())
      throw std::invalid_argument("panel: offsets must be strictly positive");
    if (covariates.size() > 0 && covariates.rows() != n_cells())
      throw std::invalid_argument("panel: covariates must have one row per cell");
    if (!y.allFinite()) throw std::invalid_argument("panel: missing or non-finite outcomes");
    if (!coords.allFinite()) throw std::invalid_argument("panel: non-finite coordinates");
    const int n1 = n_treated();
    if (n1 == 0) throw std::invalid_argument("panel: no treated units");
    if (n1 == n_units) throw std::invalid_argument("panel: no control units");
    if (t_star < 1 || t_star > n_times)
      throw std::invalid_argument("panel: t_star must lie in 1..T");
    if (time_values.size() != n_times)
      throw std::invalid_argument("panel: time_values length mismatch");
  }
};

struct ObsMisPartition {
  std::vector<CellId> obs;  // D_it = 0
  std::vector<CellId> mis;  // D_it = 1
};

inline ObsMisPartition partition(const PanelData& panel) {
  panel.validate();
  ObsMisPartition part;
  for (int i = 0; i < panel.n_units; ++i)
    for (int t = 0; t < panel.n_times; ++t)
      (panel.is_treated_cell(i, t) ? part.mis : part.obs).push_back({i, t});
  if (part.mis.empty()) throw std::invalid_argument("partition: nothing to predict");
  return part;
}

inline VectorXd gather_cells(const MatrixXd& grid, const std::vector<CellId>& cells) {
  VectorXd out(cells.size());
  for (std::size_t k = 0; k < cells.size(); ++k) out(k) = grid(cells[k].unit, cells[k].time);
  return out;
}

// Mean-model design matrix over the given cells: covariate columns, plus one
// dummy column per unit when unit fixed effects are on. The global intercept
// column is dropped in that case (unit dummies span it).
inline MatrixXd design_matrix(const PanelData& panel, const std::vector<CellId>& cells,
                              bool include_intercept) {
  const int p = static_cast<int>(panel.covariates.cols());
  const bool fe = panel.unit_fixed_effects;
  const int intercept = (include_intercept && !fe) ? 1 : 0;
  MatrixXd w(cells.size(), intercept + p + (fe ? panel.n_units : 0));
  w.setZero();
  for (std::size_t r = 0; r < cells.size(); ++r) {
    int c = 0;
    if (intercept) w(r, c++) = 1.0;
    for (int j = 0; j < p; ++j) w(r, c++) = panel.covariates(panel.cell_index(cells[r].unit, cells[r].time), j);
    if (fe) w(r, c + cells[r].unit) = 1.0;
  }
  return w;
}

struct PanelLoad {
  PanelData panel;
  std::map<std::string, int> unit_index;  // original id -> dense index
  std::map<double, int> time_index;       // original time -> dense index
};

// CSV columns: unit_id,time,y,treated,lon,lat[,offset][,x1..xp]. `schema`
// remaps logical names to actual header names. Unit and time indices are
// relabeled to dense 0-based ranges (sorted by original value).
inline PanelLoad load_panel(const std::string& path,
                            const std::map<std::string, std::string>& schema = {}) {
  const CsvTable csv = read_csv(path);
  auto name_of = [&](const std::string& logical) {
    auto it = schema.find(logical);
    return it == schema.end() ? logical : it->second;
  };
  auto need = [&](const std::string& logical) {
    const int c = csv.column(name_of(logical));
    if (c < 0)
      throw std::invalid_argument("panel CSV missing column '" + name_of(logical) + "'");
    return c;
  };
  const int c_unit = need("unit_id");
  const int c_time = need("time");
  const int c_y = need("y");
  const int c_treated = need("treated");
  const int c_lon = need("lon");
  const int c_lat = need("lat");
  const int c_offset = csv.column(name_of("offset"));

  // Covariates: explicit schema entry "covariates" (comma list) or any
  // remaining columns whose names start with 'x'.
  std::vector<int> c_covs;
  std::set<int> known = {c_unit, c_time, c_y, c_treated, c_lon, c_lat};
  if (c_offset >= 0) known.insert(c_offset);
  if (auto it = schema.find("covariates"); it != schema.end()) {
    for (const auto& nm : split_csv_line(it->second)) {
      const int c = csv.column(nm);
      if (c < 0) throw std::invalid_argument("panel CSV missing covariate column '" + nm + "'");
      c_covs.push_back(c);
    }
  } else {
    for (std::size_t c = 0; c < csv.header.size(); ++c)
      if (!known.count(static_cast<int>(c)) && !csv.header[c].empty() && csv.header[c][0] == 'x')
        c_covs.push_back(static_cast<int>(c));
  }

  std::map<std::string, int> unit_index;
  std::map<double, int> time_index;
  for (const auto& row : csv.rows) {
    unit_index.emplace(row[c_unit], 0);
    time_index.emplace(parse_double(row[c_time]), 0);
  }
  int k = 0;
  for (auto& [id, idx] : unit_index) idx = k++;
  k = 0;
  for (auto& [tv, idx] : time_index) idx = k++;

  const int n = static_cast<int>(unit_index.size());
  const int t = static_cast<int>(time_index.size());
  if (static_cast<long>(csv.rows.size()) != static_cast<long>(n) * t)
    throw std::invalid_argument("panel CSV is not rectangular: expected " +
                                std::to_string(static_cast<long>(n) * t) + " rows, found " +
                                std::to_string(csv.rows.size()));

  PanelData panel;
  panel.n_units = n;
  panel.n_times = t;
  panel.y = MatrixXd::Constant(n, t, std::numeric_limits<double>::quiet_NaN());
  panel.coords = MatrixXd::Zero(n, 2);
  panel.offset = MatrixXd::Ones(n, t);
  panel.covariates = MatrixXd::Zero(c_covs.empty() ? 0 : n * t, static_cast<int>(c_covs.size()));
  panel.treated.assign(n, 0);
  panel.unit_labels.resize(n);
  panel.time_values.resize(t);
  for (const auto& [id, idx] : unit_index) panel.unit_labels[idx] = id;
  for (const auto& [tv, idx] : time_index) panel.time_values(idx) = tv;

  MatrixXd d_it = MatrixXd::Constant(n, t, -1.0);
  std::vector<std::uint8_t> seen(static_cast<std::size_t>(n) * t, 0);
  for (const auto& row : csv.rows) {
    const int i = unit_index.at(row[c_unit]);
    const int s = time_index.at(parse_double(row[c_time]));
    auto& mark = seen[static_cast<std::size_t>(i) * t + s];
    if (mark) throw std::invalid_argument("panel CSV has duplicate cell (unit " + row[c_unit] + ")");
    mark = 1;
    panel.y(i, s) = parse_double(row[c_y]);
    const long d = parse_long(row[c_treated]);
    if (d != 0 && d != 1) throw std::invalid_argument("treated column must be 0/1");
    d_it(i, s) = static_cast<double>(d);
    panel.coords(i, 0) = parse_double(row[c_lon]);
    panel.coords(i, 1) = parse_double(row[c_lat]);
    if (c_offset >= 0) {
      const double off = parse_double(row[c_offset]);
      if (off <= 0.0) throw std::invalid_argument("panel CSV has non-positive offset");
      panel.offset(i, s) = off;
    }
    for (std::size_t j = 0; j < c_covs.size(); ++j)
      panel.covariates(panel.cell_index(i, s), static_cast<int>(j)) =
          parse_double(row[c_covs[j]]);
  }

  // Recover t_star from the treatment mask and check the block-adoption rule:
  // per unit the treated flags are all zero, or exactly the t >= T* block.
  int t_star = 0;  // 0 = no treated unit found yet
  for (int i = 0; i < n; ++i) {
    int first = -1;
    for (int s = 0; s < t; ++s)
      if (d_it(i, s) == 1.0) {
        first = s;
        break;
      }
    if (first < 0) continue;
    for (int s = first; s < t; ++s)
      if (d_it(i, s) != 1.0)
        throw std::invalid_argument("treated unit '" + panel.unit_labels[i] +
                                    "' has a treatment gap");
    if (t_star == 0)
      t_star = first + 1;
    else if (t_star != first + 1)
      throw std::invalid_argument("staggered adoption detected: units differ in first treated period");
    panel.treated[i] = 1;
  }
  if (t_star == 0) throw std::invalid_argument("panel: no treated units");
  panel.t_star = t_star;
  panel.validate();
  return {std::move(panel), std::move(unit_index), std::move(time_index)};
}

inline void write_panel(const std::string& path, const PanelData& panel) {
  std::ostringstream os;
  os << "unit_id,time,y,treated,lon,lat,offset";
  for (int j = 0; j < panel.covariates.cols(); ++j) os << ",x" << (j + 1);
  os << "\n";
  for (int i = 0; i < panel.n_units; ++i) {
    const std::string label =
        panel.unit_labels.empty() ? std::to_string(i + 1) : panel.unit_labels[i];
    for (int s = 0; s < panel.n_times; ++s) {
      os << label << ',' << fmt_double(panel.time_values(s)) << ',' << fmt_double(panel.y(i, s))
         << ',' << (panel.is_treated_cell(i, s) ? 1 : 0) << ',' << fmt_double(panel.coords(i, 0))
         << ',' << fmt_double(panel.coords(i, 1)) << ',' << fmt_double(panel.offset(i, s));
      for (int j = 0; j < panel.covariates.cols(); ++j)
        os << ',' << fmt_double(panel.covariates(panel.cell_index(i, s), j));
      os << "\n";
    }
  }
  atomic_write_text(path, os.str());
}

}  // namespace stgp
