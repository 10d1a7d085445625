#pragma once

// Synthetic panel generator. Produces unbalanced plant panels whose visible
// columns are exactly consistent with the model: static input choices solve
// the cost-minimization problem at the drawn state, productivity follows a
// VAR(1) with an export dummy, export entry is a logistic draw on the log
// state, and investment follows a log-linear policy increasing in omega_H.
// Materials expenditure is determined jointly within each industry-year cell
// (the supply shifter depends on the cell geometric mean of expenditures), so
// cells are solved as fixed points.

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "facet/ces.hpp"
#include "facet/panel.hpp"

namespace facet {
namespace synth {

struct MarkovProcess {
  Eigen::Matrix3d lag;            // rows = (H,S,U) equations, cols = lagged (H,S,U)
  Eigen::Vector3d intercept;
  Eigen::Vector3d export_effect;  // coefficient on e_{t-1}
  Eigen::Matrix3d shock_cov;      // innovation covariance (PSD; zero allowed)

  void validate() const;  // stationarity + PSD
};

MarkovProcess default_markov();

struct WageConfig {
  // Relative-wage variation is what moves the skilled/unskilled mix, so these
  // two dispersions control how sharply the labor-nest curvature is pinned
  // down in generated panels; the defaults keep that variation substantial.
  double plant_sd = 0.35;       // permanent plant effect, log scale, per type
  double persistence = 0.6;     // AR(1) of the transitory log deviation
  double innovation_sd = 0.12;
};

struct PriceConfig {
  double persistence = 0.7;
  double innovation_sd = 0.07;
};

struct DemandConfig {
  double sd = 0.35;           // s.d. of the log required-output draw
  double mean_shift = 0.0;    // level calibration knob (keeps expenditure
                              // geomeans near the baseline)
  double omega_coupling = 0.4;   // loading on omega_H
  double exporter_shift = 0.15;  // level shift while exporting
  double clip_fraction = 0.8;    // cap at this fraction of attainable output
};

struct ExportChoiceConfig {
  double intercept = -2.2;     // index when not exporting, baseline state
  double continuation = 4.8;   // added while exporting
  double coef_omega_H = 0.3;
  double coef_omega_S = 0.2;
  double coef_omega_U = 0.4;
  double coef_log_k = 0.3;
  double initial_rate = 0.3;  // P(e=1) in the first year
};

struct InvestmentConfig {
  double coef_log_k = 1.0;    // policy slope on log K
  double coef_omega_H = 1.0;  // must be > 0 (invertibility)
  double coef_export = 0.1;   // e_t
  double coef_export_next = 0.05;  // e_{t+1}, decided this period
  double depreciation = 0.1;
};

struct SimConfig {
  int n_plants = 2000;
  int n_years = 10;
  int n_industries = 6;
  std::uint64_t seed = 20260822;

  ces::StructuralParams params{0.0833, 2.106, -2.8911, -1.2026};
  // Built from the expenditure construction so alpha_K / alpha_M equals tau
  // exactly; rounds to (0.056, 0.672, 0.272) with the labor split (0.321,
  // 0.679).
  ces::CesShares shares = ces::shares_from_expenditures(
      0.321 * 0.272 / 0.672, 0.679 * 0.272 / 0.672, 1.0, 0.0833);

  MarkovProcess markov = default_markov();
  WageConfig wages;
  PriceConfig price;
  DemandConfig demand;
  ExportChoiceConfig export_choice;
  InvestmentConfig investment;

  // Initial log-capital distribution. Materials, unlike capital, respond to
  // the productivity and demand realizations, so their panel geometric mean
  // drifts above the technology anchor; the nonzero capital mean offsets that
  // drift so the anchored capital/materials wedge recovered from generated
  // data equals params.tau (calibrated under the default configuration).
  double initial_log_k_mean = 0.14;
  double initial_log_k_sd = 0.8;
  double measurement_error_sd = 0.05;
  double attrition_rate = 0.02;  // yearly exit hazard from the second year on

  // Overlay a permanent level step on effective omega_U from the first
  // exporting year onward. The latent VAR path is untouched, so the planted
  // difference-in-differences effect is exactly this constant at every
  // post-entry horizon.
  double treatment_effect_U = 0.0;

  // Machinery stock (optional outcome column): log M = coef_log_k * log K
  // + step * post-entry + noise.
  double machinery_coef_log_k = 0.3;
  double machinery_step = 0.0;
  double machinery_noise_sd = 0.1;

  // Expected export share used only to center the productivity paths so that
  // panel geometric means sit near the normalization baseline.
  double approx_export_rate = 0.3;

  void validate() const;
};

struct TruthRow {
  std::string plant_id;
  int year = 0;
  double omega_H = 0, omega_S = 0, omega_U = 0;  // effective (incl. treatment)
  double ccp = 0;                  // P(e_{t+1} = 1 | state_t)
  double planned_log_output = 0;   // log required output (pre measurement error)
};

struct PriceRow {
  std::string industry_id;
  int year = 0;
  double price_index = 0;
};

struct SimPanel {
  panel::Panel panel;
  std::vector<TruthRow> truth;    // aligned with panel.rows
  std::vector<PriceRow> prices;
  double max_foc_residual = 0;    // generation-time self-check
  double max_cell_gap = 0;        // |cell geomean - fixed point| in logs
};

SimPanel simulate(const SimConfig& config);

// Emits the ingestion-schema panel CSV; truth and price files are written as
// siblings (<stem>_truth.csv, <stem>_prices.csv) unless paths are given.
struct WritePaths {
  std::string panel_csv;
  std::string truth_csv;   // empty = derive from panel path
  std::string prices_csv;  // empty = derive from panel path
  bool include_truth = true;
};

void write_outputs(const SimPanel& sim, const WritePaths& paths);

}  // namespace synth
}  // namespace facet
