#include "facet/panel.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "facet/csv.hpp"

namespace facet {
namespace panel {

namespace {

int intern(std::vector<std::string>& names,
           std::unordered_map<std::string, int>& lookup, const std::string& s) {
  auto it = lookup.find(s);
  if (it != lookup.end()) return it->second;
  int id = static_cast<int>(names.size());
  names.push_back(s);
  lookup.emplace(s, id);
  return id;
}

}  // namespace

void Panel::rebuild_index() {
  std::sort(rows.begin(), rows.end(), [](const PlantYear& a, const PlantYear& b) {
    if (a.plant != b.plant) return a.plant < b.plant;
    return a.year < b.year;
  });
  plant_rows.assign(plant_names.size(), {});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    auto& list = plant_rows[static_cast<std::size_t>(r.plant)];
    if (!list.empty() && rows[static_cast<std::size_t>(list.back())].year == r.year)
      throw schema_error("duplicate plant-year: " + plant_names[r.plant] + ", " +
                         std::to_string(r.year));
    list.push_back(static_cast<int>(i));
  }
}

LoadResult load_panel(const std::string& path) {
  CsvTable t = read_csv(path);
  LoadResult out;
  Panel& p = out.panel;

  int c_plant = t.require_column("plant_id");
  int c_ind = t.require_column("industry_id");
  int c_year = t.require_column("year");
  int c_exp = t.require_column("export");
  int c_q = t.require_column("output");
  int c_k = t.require_column("capital");
  int c_i = t.require_column("investment");
  int c_s = t.require_column("skilled_n");
  int c_u = t.require_column("unskilled_n");
  int c_ps = t.require_column("skilled_pay");
  int c_pu = t.require_column("unskilled_pay");
  int c_m = t.require_column("materials_exp");
  int c_mach = t.column("machinery");
  p.has_machinery = c_mach >= 0;

  std::unordered_map<std::string, int> plant_lut, ind_lut;
  out.report.rows_read = t.rows.size();

  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    PlantYear r;
    r.year = static_cast<int>(t.number_at(i, c_year));
    double e = t.number_at(i, c_exp);
    if (e != 0.0 && e != 1.0)
      throw parse_error("export flag must be 0 or 1 at data row " +
                        std::to_string(i + 1));
    r.exporter = e == 1.0;
    r.output = t.number_at(i, c_q);
    r.capital = t.number_at(i, c_k);
    r.investment = t.number_at(i, c_i);
    r.s_n = t.number_at(i, c_s);
    r.u_n = t.number_at(i, c_u);
    r.e_S = t.number_at(i, c_ps);
    r.e_U = t.number_at(i, c_pu);
    r.e_M = t.number_at(i, c_m);
    if (c_mach >= 0) {
      double m = t.number_at(i, c_mach);
      r.machinery = m > 0.0 ? m : std::numeric_limits<double>::quiet_NaN();
    }
    bool ok = r.output > 0.0 && r.capital > 0.0 && r.s_n > 0.0 && r.u_n > 0.0 &&
              r.e_S > 0.0 && r.e_U > 0.0 && r.e_M > 0.0;
    if (!ok) {
      ++out.report.rows_dropped_nonpositive;
      continue;
    }
    r.plant = intern(p.plant_names, plant_lut, t.rows[i][c_plant]);
    r.industry = intern(p.industry_names, ind_lut, t.rows[i][c_ind]);
    p.rows.push_back(r);
  }
  if (p.rows.empty()) throw schema_error("panel has no usable rows: " + path);
  p.rebuild_index();
  if (out.report.rows_dropped_nonpositive > 0)
    out.report.notes.push_back(
        std::to_string(out.report.rows_dropped_nonpositive) +
        " rows dropped for non-positive required fields");
  return out;
}

void write_panel(const Panel& p, const std::string& path) {
  CsvWriter w(path);
  std::vector<std::string> head = {
      "plant_id",   "industry_id", "year",        "export",
      "output",     "capital",     "investment",  "skilled_n",
      "unskilled_n", "skilled_pay", "unskilled_pay", "materials_exp"};
  if (p.has_machinery) head.push_back("machinery");
  w.write_row(head);
  for (const auto& r : p.rows) {
    std::vector<std::string> f = {
        p.plant_names[r.plant],    p.industry_names[r.industry],
        std::to_string(r.year),    r.exporter ? "1" : "0",
        format_number(r.output),   format_number(r.capital),
        format_number(r.investment), format_number(r.s_n),
        format_number(r.u_n),      format_number(r.e_S),
        format_number(r.e_U),      format_number(r.e_M)};
    if (p.has_machinery)
      f.push_back(std::isnan(r.machinery) ? "0" : format_number(r.machinery));
    w.write_row(f);
  }
}

IndustryYearAggregates industry_aggregates(const Panel& p, PriceMode mode,
                                           const PriceInputs& inputs) {
  IndustryYearAggregates agg;

  // Within-cell expenditure geometric means come from the panel itself.
  std::map<std::pair<int, int>, std::pair<double, int>> logsum;
  for (const auto& r : p.rows) {
    auto& cell = logsum[{r.industry, r.year}];
    cell.first += std::log(r.e_M);
    cell.second += 1;
  }
  for (const auto& [key, v] : logsum) {
    auto& c = agg.cells[key];
    c.em_geomean = std::exp(v.first / v.second);
    c.count = v.second;
  }

  // Price index per cell, by mode.
  if (inputs.price_index_csv.empty())
    throw config_error("price index file is required");
  CsvTable pt = read_csv(inputs.price_index_csv);
  int c_ind = pt.require_column("industry_id");
  int c_year = pt.require_column("year");
  int c_px = pt.require_column("price_index");
  std::unordered_map<std::string, int> ind_lut;
  for (std::size_t i = 0; i < p.industry_names.size(); ++i)
    ind_lut[p.industry_names[i]] = static_cast<int>(i);

  std::map<std::pair<int, int>, double> price;  // (industry, year) -> index
  for (std::size_t i = 0; i < pt.rows.size(); ++i) {
    auto it = ind_lut.find(pt.rows[i][c_ind]);
    if (it == ind_lut.end()) continue;  // industries absent from the panel
    double v = pt.number_at(i, c_px);
    if (!(v > 0.0))
      throw parse_error("price index must be positive at data row " +
                        std::to_string(i + 1));
    price[{it->second, static_cast<int>(pt.number_at(i, c_year))}] = v;
  }

  if (mode == PriceMode::wti_proxy) {
    for (auto& [key, c] : agg.cells) {
      auto it = price.find(key);
      if (it == price.end())
        throw dependency_error("price index missing for industry " +
                               p.industry_names[key.first] + ", year " +
                               std::to_string(key.second));
      c.price_M = it->second;
    }
  } else if (mode == PriceMode::io_weighted) {
    if (inputs.io_weights_csv.empty())
      throw config_error("io weights file is required for io_weighted mode");
    CsvTable wt = read_csv(inputs.io_weights_csv);
    int c_dst = wt.require_column("destination_industry");
    int c_org = wt.require_column("origin_industry");
    int c_w = wt.require_column("weight");
    std::map<int, std::vector<std::pair<int, double>>> weights;
    for (std::size_t i = 0; i < wt.rows.size(); ++i) {
      auto dit = ind_lut.find(wt.rows[i][c_dst]);
      auto oit = ind_lut.find(wt.rows[i][c_org]);
      if (dit == ind_lut.end()) continue;
      if (oit == ind_lut.end())
        throw schema_error("io weight origin industry not in panel: " +
                           wt.rows[i][c_org]);
      weights[dit->second].emplace_back(oit->second, wt.number_at(i, c_w));
    }
    for (auto& [dst, list] : weights) {
      double total = 0.0;
      for (auto& [o, w] : list) total += w;
      if (std::abs(total - 1.0) > 1e-6)
        throw schema_error("io weights do not sum to 1 for destination " +
                           p.industry_names[dst]);
    }
    for (auto& [key, c] : agg.cells) {
      auto wit = weights.find(key.first);
      if (wit == weights.end())
        throw dependency_error("no io weights for industry " +
                               p.industry_names[key.first]);
      double lp = 0.0;
      for (auto& [origin, w] : wit->second) {
        auto it = price.find({origin, key.second});
        if (it == price.end())
          throw dependency_error("output price missing for industry " +
                                 p.industry_names[origin] + ", year " +
                                 std::to_string(key.second));
        lp += w * std::log(it->second);
      }
      c.price_M = std::exp(lp);
    }
  } else {  // fitted: project output prices on the oil series, use fits
    if (inputs.wti_csv.empty())
      throw config_error("wti series file is required for fitted mode");
    CsvTable ot = read_csv(inputs.wti_csv);
    int c_y = ot.require_column("year");
    int c_p = ot.require_column("price");
    std::map<int, double> wti;
    for (std::size_t i = 0; i < ot.rows.size(); ++i) {
      double v = ot.number_at(i, c_p);
      if (!(v > 0.0))
        throw parse_error("wti price must be positive at data row " +
                          std::to_string(i + 1));
      wti[static_cast<int>(ot.number_at(i, c_y))] = v;
    }
    // per-industry OLS of log output price on log oil price
    for (std::size_t ind = 0; ind < p.industry_names.size(); ++ind) {
      std::vector<std::pair<double, double>> xy;
      for (const auto& [key, v] : price) {
        if (key.first != static_cast<int>(ind)) continue;
        auto it = wti.find(key.second);
        if (it == wti.end()) continue;
        xy.emplace_back(std::log(it->second), std::log(v));
      }
      double sx = 0, sy = 0, sxx = 0, sxy = 0;
      for (auto& [x, y] : xy) {
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
      }
      double n = static_cast<double>(xy.size());
      double denom = n * sxx - sx * sx;
      bool cell_needed = false;
      for (auto& [key, c] : agg.cells)
        if (key.first == static_cast<int>(ind)) cell_needed = true;
      if (!cell_needed) continue;
      if (xy.size() < 2 || std::abs(denom) < 1e-12)
        throw numerical_error(
            "cannot fit price index on oil series for industry " +
            p.industry_names[ind] + " (needs two distinct years)");
      double slope = (n * sxy - sx * sy) / denom;
      double icept = (sy - slope * sx) / n;
      for (auto& [key, c] : agg.cells) {
        if (key.first != static_cast<int>(ind)) continue;
        auto it = wti.find(key.second);
        if (it == wti.end())
          throw dependency_error("wti price missing for year " +
                                 std::to_string(key.second));
        c.price_M = std::exp(icept + slope * std::log(it->second));
      }
    }
  }
  return agg;
}

namespace {

NormalizedPanel normalize_impl(const Panel& p, const IndustryYearAggregates& agg,
                               Scope scope, bool unit_baseline) {
  NormalizedPanel np;
  np.scope = scope;
  np.plant_names = p.plant_names;
  np.industry_names = p.industry_names;
  np.n_groups = scope == Scope::global
                    ? 1
                    : static_cast<int>(p.industry_names.size());

  auto group_of = [&](const PlantYear& r) {
    return scope == Scope::global ? 0 : r.industry;
  };

  struct Acc {
    double K = 0, S = 0, U = 0, Q = 0, E_S = 0, E_U = 0, E_M = 0;
    double W_S = 0, W_U = 0, P = 0, EM_IDX = 0;
    double I = 0, MACH = 0;
    int n = 0, n_inv = 0, n_mach = 0;
  };
  std::vector<Acc> acc(static_cast<std::size_t>(np.n_groups));

  for (const auto& r : p.rows) {
    auto& a = acc[static_cast<std::size_t>(group_of(r))];
    a.K += std::log(r.capital);
    a.S += std::log(r.s_n);
    a.U += std::log(r.u_n);
    a.Q += std::log(r.output);
    a.E_S += std::log(r.e_S);
    a.E_U += std::log(r.e_U);
    a.E_M += std::log(r.e_M);
    a.W_S += std::log(r.wage_S());
    a.W_U += std::log(r.wage_U());
    const auto& cell = agg.at(r.industry, r.year);
    a.P += std::log(cell.price_M);
    a.EM_IDX += std::log(cell.em_geomean);
    ++a.n;
    if (r.investment > 0.0) {
      a.I += std::log(r.investment);
      ++a.n_inv;
    }
    if (!std::isnan(r.machinery)) {
      a.MACH += std::log(r.machinery);
      ++a.n_mach;
    }
  }

  np.baselines.resize(static_cast<std::size_t>(np.n_groups));
  for (int g = 0; g < np.n_groups; ++g) {
    auto& b = np.baselines[static_cast<std::size_t>(g)];
    const auto& a = acc[static_cast<std::size_t>(g)];
    if (unit_baseline || a.n == 0) continue;
    double n = a.n;
    b.K = std::exp(a.K / n);
    b.S = std::exp(a.S / n);
    b.U = std::exp(a.U / n);
    b.Q = std::exp(a.Q / n);
    b.E_S = std::exp(a.E_S / n);
    b.E_U = std::exp(a.E_U / n);
    b.E_M = std::exp(a.E_M / n);
    b.W_S = std::exp(a.W_S / n);
    b.W_U = std::exp(a.W_U / n);
    b.P = std::exp(a.P / n);
    b.EM_IDX = std::exp(a.EM_IDX / n);
    if (a.n_inv > 0) b.I = std::exp(a.I / a.n_inv);
    if (a.n_mach > 0) b.MACH = std::exp(a.MACH / a.n_mach);
  }

  np.rows.resize(p.rows.size());
  for (std::size_t i = 0; i < p.rows.size(); ++i) {
    const auto& r = p.rows[i];
    auto& o = np.rows[i];
    o.group = group_of(r);
    const auto& b = np.baselines[static_cast<std::size_t>(o.group)];
    o.plant = r.plant;
    o.industry = r.industry;
    o.year = r.year;
    o.exporter = r.exporter;
    o.k = r.capital / b.K;
    o.s = r.s_n / b.S;
    o.u = r.u_n / b.U;
    o.q = r.output / b.Q;
    o.w_s = r.wage_S() / b.W_S;
    o.w_u = r.wage_U() / b.W_U;
    o.inv_pos = r.investment > 0.0;
    o.inv = o.inv_pos ? r.investment / b.I : 0.0;
    o.em_own = r.e_M / b.E_M;
    const auto& cell = agg.at(r.industry, r.year);
    o.p_index = cell.price_M / b.P;
    o.em_index = cell.em_geomean / b.EM_IDX;
    o.e_S = r.e_S;
    o.e_U = r.e_U;
    o.e_M = r.e_M;
    o.machinery = std::isnan(r.machinery) ? r.machinery : r.machinery / b.MACH;
  }

  np.plant_rows = p.plant_rows;
  for (const auto& list : np.plant_rows) {
    for (std::size_t j = 0; j + 1 < list.size(); ++j) {
      auto& cur = np.rows[static_cast<std::size_t>(list[j])];
      auto& nxt = np.rows[static_cast<std::size_t>(list[j + 1])];
      if (nxt.year == cur.year + 1) {
        cur.next = list[j + 1];
        nxt.prev = list[j];
        cur.e_next = nxt.exporter ? 1 : 0;
      }
    }
  }
  return np;
}

}  // namespace

NormalizedPanel normalize(const Panel& p, const IndustryYearAggregates& agg,
                          Scope scope) {
  return normalize_impl(p, agg, scope, false);
}

NormalizedPanel normalize_unit_baseline(const Panel& p,
                                        const IndustryYearAggregates& agg) {
  return normalize_impl(p, agg, Scope::global, true);
}

ces::CesShares shares_from_panel(const NormalizedPanel& np, double tau) {
  if (np.scope != Scope::global)
    throw config_error("shares_from_panel needs global scope; use shares_for_group");
  return shares_for_group(np, 0, tau);
}

ces::CesShares shares_for_group(const NormalizedPanel& np, int group, double tau) {
  const auto& b = np.baselines.at(static_cast<std::size_t>(group));
  return ces::shares_from_expenditures(b.E_S, b.E_U, b.E_M, tau);
}

}  // namespace panel
}  // namespace facet
