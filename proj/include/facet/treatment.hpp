#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "facet/numerics.hpp"
#include "facet/panel.hpp"

namespace facet {
namespace treatment {

// ---- Export-entry propensity.
//
// Conditional probability of exporting next year given the current state:
// logistic in the recovered productivity components, log capital, log wages,
// the industry-cell price and spend indices, current export status, and
// industry dummies. Dummies are dropped once if they induce separation.

struct CcpFit {
  Eigen::VectorXd score;        // fitted entry probability for every row
  numerics::LogitFit logit;
  std::vector<int> sample_rows;  // rows with observed next-year status
  bool industry_dummies = true;
};

CcpFit estimate_ccp(const panel::NormalizedPanel& np,
                    const Eigen::MatrixXd& omega);

// ---- Export cohorts.

enum class Cohort { never, entrant, other };

struct Cohorts {
  std::vector<Cohort> status;   // per plant
  std::vector<int> entry_year;  // per plant; first exporting year, -1 if none
  int n_never = 0, n_entrant = 0, n_other = 0;
};

// Entrants start out as non-exporters and later export; never-exporters stay
// out the whole window; plants already exporting when first observed (or with
// no pre-entry year) are set aside.
Cohorts classify(const panel::NormalizedPanel& np);

// ---- Propensity matching.

struct MatchOptions {
  int k = 5;  // controls per treated plant
};

struct MatchedSet {
  struct Case {
    int plant = -1;
    int entry_year = 0;
    int pre_row = -1;  // treated row the year before entry
    double score = 0.0;
    std::vector<int> control_plants;
    std::vector<int> control_pre_rows;
    std::vector<double> control_scores;
  };
  std::vector<Case> cases;
  int n_candidates = 0;  // never-exporter pool size
  int n_unmatched = 0;   // entrants without a usable pre-year or controls
};

// Nearest-neighbor matching with replacement on the entry propensity the year
// before entry, within industry; ties break toward the smaller plant id.
MatchedSet match(const panel::NormalizedPanel& np, const Cohorts& cohorts,
                 const Eigen::VectorXd& score, const MatchOptions& opt = {});

// ---- Pre-entry balance.

struct BalanceRow {
  std::string name;
  double treated_mean = 0.0, control_mean = 0.0, diff = 0.0;
  double t_stat = 0.0, p_value = 1.0;
};

struct BalanceTable {
  std::vector<BalanceRow> rows;
  int n_treated = 0;
  double control_weight = 0.0;  // total matched-control weight
};

// State variables the year before entry (log capital, log wages, cell price
// and spend indices, productivity components), treated vs matched controls,
// with match weights and a Welch t statistic on effective sample sizes.
BalanceTable balance_table(const panel::NormalizedPanel& np,
                           const Eigen::MatrixXd& omega, const MatchedSet& ms);

// ---- Matched difference-in-differences.

struct DidOptions {
  int min_h = -4, max_h = 4;  // event-time horizons; h = -1 is the reference
  int bootstrap_B = 200;
  std::uint64_t seed = 7;
  double ci_level = 0.90;
};

struct DidResult {
  std::vector<int> horizons;
  Eigen::VectorXd effect;      // average treated-minus-control change
  Eigen::VectorXd lo, hi;      // plant-clustered bootstrap percentile bands
  std::vector<int> n_cases;    // treated plants contributing per horizon
};

// Average over entrants of the outcome change from the pre-entry year to
// entry + h, net of the matched controls' change over the same calendar
// window. The bootstrap resamples plants and repeats cohort assembly and
// matching with the propensity scores held fixed.
DidResult matched_did(const panel::NormalizedPanel& np,
                      const Eigen::VectorXd& outcome, const Cohorts& cohorts,
                      const Eigen::VectorXd& score,
                      const MatchOptions& mopt = {}, const DidOptions& dopt = {});

// ---- Event study.

struct EventStudyOptions {
  int max_lead = 4;  // leads bin at -max_lead; k = -1 is the reference
  int max_lag = 4;   // lags bin at +max_lag
};

struct EventStudyResult {
  std::vector<int> event_time;  // -max_lead..-2, 0..max_lag
  Eigen::VectorXd coef, se;
  int n_obs = 0, n_plants = 0;
};

// Outcome on event-time dummies around export entry with plant and
// industry-year effects absorbed; the sample is entrants plus never-exporters
// and endpoint horizons are binned. Heteroskedasticity-robust standard errors
// with a degrees-of-freedom correction for the absorbed effects.
EventStudyResult event_study(const panel::NormalizedPanel& np,
                             const Eigen::VectorXd& outcome,
                             const Cohorts& cohorts,
                             const EventStudyOptions& opt = {});

}  // namespace treatment
}  // namespace facet
