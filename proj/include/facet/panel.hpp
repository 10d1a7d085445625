#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "facet/ces.hpp"
#include "facet/common.hpp"

namespace facet {
namespace panel {

// One plant-year record in raw units. Identifiers are interned; wages are
// derived as pay / headcount. Investment may be non-positive (such rows are
// excluded from log-investment regressions but stay in the panel).
struct PlantYear {
  int plant = -1;
  int industry = -1;
  int year = 0;
  bool exporter = false;
  double output = 0.0;
  double capital = 0.0;
  double investment = 0.0;
  double s_n = 0.0, u_n = 0.0;      // skilled / unskilled headcounts
  double e_S = 0.0, e_U = 0.0;      // wage bills
  double e_M = 0.0;                 // materials expenditure
  double machinery = std::numeric_limits<double>::quiet_NaN();

  double wage_S() const { return e_S / s_n; }
  double wage_U() const { return e_U / u_n; }
};

struct Panel {
  std::vector<PlantYear> rows;  // sorted by (plant, year)
  std::vector<std::string> plant_names;
  std::vector<std::string> industry_names;
  std::vector<std::vector<int>> plant_rows;  // row indices per plant, year order

  bool has_machinery = false;

  void rebuild_index();  // sorts rows, rebuilds plant_rows, checks duplicates
};

struct LoadReport {
  std::size_t rows_read = 0;
  std::size_t rows_dropped_nonpositive = 0;
  std::vector<std::string> notes;
};

struct LoadResult {
  Panel panel;
  LoadReport report;
};

// CSV schema: plant_id, industry_id, year, export, output, capital,
// investment, skilled_n, unskilled_n, skilled_pay, unskilled_pay,
// materials_exp and optional machinery. Rows violating positivity of the
// always-positive fields are dropped and counted; duplicate plant-years and
// malformed cells are hard errors.
LoadResult load_panel(const std::string& path);

void write_panel(const Panel& p, const std::string& path);

// ---- Industry-year aggregates.

enum class PriceMode { wti_proxy, io_weighted, fitted };

struct PriceInputs {
  std::string price_index_csv;  // materials index (wti_proxy) or output index
  std::string io_weights_csv;   // io_weighted only
  std::string wti_csv;          // fitted only: year, price
};

struct IndustryYearAggregates {
  struct Cell {
    double price_M = 0.0;      // materials price index for the cell
    double em_geomean = 0.0;   // within-cell geometric mean materials spend
    int count = 0;
  };
  std::map<std::pair<int, int>, Cell> cells;  // (industry, year) -> cell

  const Cell& at(int industry, int year) const {
    auto it = cells.find({industry, year});
    if (it == cells.end())
      throw facet::dependency_error("no aggregate for industry-year cell");
    return it->second;
  }
};

// Builds within-cell expenditure geometric means from the panel and attaches a
// materials price index per cell: taken directly from the price file
// (wti_proxy), combined from origin-industry output prices with IO weights
// (io_weighted), or fitted from a regression of log output prices on the log
// oil series (fitted).
IndustryYearAggregates industry_aggregates(const Panel& p, PriceMode mode,
                                           const PriceInputs& inputs);

// ---- Normalization.

enum class Scope { global, per_industry };

struct NormalizedPanel {
  struct Row {
    int plant = -1, industry = -1, year = 0, group = 0;
    bool exporter = false;
    int e_next = -1;           // export status next year; -1 when unobserved
    int prev = -1, next = -1;  // adjacent-year row links within plant
    double k = 0, s = 0, u = 0, q = 0;  // normalized levels
    double w_s = 0, w_u = 0;            // normalized wages
    double inv = 0;                     // normalized investment (inv_pos only)
    bool inv_pos = false;
    double em_own = 0;                  // normalized own materials expenditure
    double p_index = 0, em_index = 0;   // normalized cell aggregates
    double e_S = 0, e_U = 0, e_M = 0;   // raw expenditures (used via ratios)
    double machinery = std::numeric_limits<double>::quiet_NaN();
  };

  // Geometric-mean baselines per normalization group. Dividing raw values by
  // these reproduces the stored normalized levels.
  struct Baseline {
    double K = 1, S = 1, U = 1, Q = 1, E_S = 1, E_U = 1, E_M = 1;
    double W_S = 1, W_U = 1, I = 1, MACH = 1, P = 1, EM_IDX = 1;
  };

  std::vector<Row> rows;
  Scope scope = Scope::global;
  int n_groups = 1;
  std::vector<Baseline> baselines;
  std::vector<std::string> plant_names, industry_names;
  std::vector<std::vector<int>> plant_rows;
};

// Normalizes every variable by its geometric mean over the scope group (whole
// sample, or one industry at a time). Cell aggregates are normalized by their
// observation-weighted geometric means so the industry-level and plant-level
// baselines agree.
NormalizedPanel normalize(const Panel& p, const IndustryYearAggregates& agg,
                          Scope scope = Scope::global);

// Variant with all baselines fixed at one: values pass through unscaled. Used
// when data are already expressed relative to a known baseline (simulated
// panels), where exact planted values must survive the round trip.
NormalizedPanel normalize_unit_baseline(const Panel& p,
                                        const IndustryYearAggregates& agg);

// Baseline weights implied by the normalized panel's expenditure geometric
// means at a given tau. Global scope only; per-industry scope has one weight
// set per group.
ces::CesShares shares_from_panel(const NormalizedPanel& np, double tau);
ces::CesShares shares_for_group(const NormalizedPanel& np, int group, double tau);

}  // namespace panel
}  // namespace facet
