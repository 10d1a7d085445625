#pragma once

#include <cmath>

#include "facet/common.hpp"

namespace facet {
namespace ces {

// Deep technology/market parameters. Both nest exponents live strictly below 1
// and away from 0 (elasticities 1/(1-rho), 1/(1-theta) exist; the Cobb-Douglas
// limit at 0 is out of scope). eta_M is the inverse materials supply
// elasticity; the markdown eta/(1+eta) lies in (0,1).
struct StructuralParams {
  double tau = 0.0;    // alpha_K / alpha_M, capital wedge at the baseline
  double eta_M = 0.0;  // materials supply elasticity
  double theta = 0.0;  // inner (skilled/unskilled) nest exponent
  double rho = 0.0;    // outer (K/M/labor) nest exponent

  void validate() const {
    if (!(tau > 0.0)) throw facet::domain_error("tau must be positive");
    if (!(eta_M > 0.0)) throw facet::domain_error("eta_M must be positive");
    if (!(theta < 1.0) || theta == 0.0)
      throw facet::domain_error("theta must be < 1 and nonzero");
    if (!(rho < 1.0) || rho == 0.0)
      throw facet::domain_error("rho must be < 1 and nonzero");
  }

  double elasticity_outer() const { return 1.0 / (1.0 - rho); }
  double elasticity_inner() const { return 1.0 / (1.0 - theta); }
  double markdown() const { return eta_M / (eta_M + 1.0); }
};

// Normalized CES weights; one simplex per nest.
struct CesShares {
  double alpha_K = 0.0, alpha_M = 0.0, alpha_L = 0.0;  // outer nest
  double alpha_S = 0.0, alpha_U = 0.0;                 // inner nest
};

// Factor-augmenting productivities in normalized log form. H augments capital
// and materials alike (Hicks-neutral part), S and U augment the two labor
// types. Relative terms: L-augmenting gap S-H, skill bias U-S.
struct ProductivityTriple {
  double H = 0.0, S = 0.0, U = 0.0;

  double rel_L() const { return S - H; }
  double rel_B() const { return U - S; }
};

// Baseline weights from geometric-mean expenditures; the composite labor
// expenditure is the sum of the two labor geometric means, and the capital
// weight is pinned by tau so that alpha_K / alpha_M = tau.
CesShares shares_from_expenditures(double ebar_S, double ebar_U, double ebar_M,
                                   double tau);

// Materials supply shifter for one industry-year cell: combines the normalized
// index price and the normalized cell expenditure so that the plant's
// normalized materials quantity is (E_norm * Phi)^(eta/(1+eta)).
inline double supply_shifter(double p_norm, double e_norm, double eta_M) {
  if (!(eta_M > 0.0)) throw facet::domain_error("eta_M must be positive");
  if (!(p_norm > 0.0) || !(e_norm > 0.0))
    throw facet::domain_error("supply_shifter needs positive index inputs");
  return std::pow(p_norm, -(1.0 + eta_M) / eta_M) * std::pow(e_norm, 1.0 / eta_M);
}

inline double materials_quantity(double em_norm, double phi, double eta_M) {
  double h = eta_M / (eta_M + 1.0);
  return std::pow(em_norm * phi, h);
}

// Normalized output of the two-nest technology. All quantities are ratios to
// their baseline geometric means; at the baseline (all ones, zero logs) output
// is exactly 1 because each nest's weights sum to one.
double output(const StructuralParams& p, const CesShares& a, double K, double M,
              double S, double U, const ProductivityTriple& w);

struct OutputGradient {
  double dK = 0.0, dM = 0.0, dS = 0.0, dU = 0.0;
};
OutputGradient output_gradient(const StructuralParams& p, const CesShares& a,
                               double K, double M, double S, double U,
                               const ProductivityTriple& w);

// ---- Step-1 inversion: productivity components from first-order conditions.
// These are pure algebra; expenditure arguments enter only through ratios and
// can be in raw units, while quantity arguments must be normalized.

// Skill-bias component U-S from the inner-nest expenditure ratio.
inline double recover_omega_B(double e_S, double e_U, double s_norm,
                              double u_norm, double theta, double alpha_S,
                              double alpha_U) {
  return std::log(e_U * alpha_S / (e_S * alpha_U)) / theta +
         std::log(s_norm / u_norm);
}

// Inner-nest composite evaluated at recovered skill bias; equals the direct
// CES aggregate of (s_norm, u_norm) with weight alpha_S.
inline double composite_labor(double s_norm, double e_S, double e_U,
                              double theta, double alpha_S) {
  return s_norm * std::pow(alpha_S * (e_S + e_U) / e_S, 1.0 / theta);
}

// Labor-augmenting gap S-H from the outer-nest labor/materials condition.
inline double recover_omega_L(double e_S, double e_U, double e_M,
                              double em_norm_phi, double rho, double eta_M,
                              double alpha_M, double alpha_L,
                              double l_composite) {
  double h = eta_M / (eta_M + 1.0);
  return std::log((alpha_M / alpha_L) * h * (e_S + e_U) / e_M) / rho +
         h * std::log(em_norm_phi) - std::log(l_composite);
}

// Hicks-neutral component from planned log output and the materials/capital
// aggregate.
inline double recover_omega_H(double y_planned, double k_norm, double e_S,
                              double e_U, double e_M, double em_norm_phi,
                              double tau, double rho, double eta_M,
                              double alpha_M) {
  double h = eta_M / (eta_M + 1.0);
  double bracket = tau * std::pow(k_norm, rho) +
                   (1.0 + h * (e_S + e_U) / e_M) * std::pow(em_norm_phi, rho * h);
  return y_planned - (std::log(alpha_M) + std::log(bracket)) / rho;
}

// Full chain for one observation; identities wS = wH + (S-H gap) and
// wU = wS + (U-S gap) hold by construction.
struct RowObservables {
  double y_planned = 0.0;  // planned (measurement-error-free) log output
  double k_norm = 0.0;
  double s_norm = 0.0;
  double u_norm = 0.0;
  double e_S = 0.0, e_U = 0.0, e_M = 0.0;  // raw expenditures
  double em_norm = 0.0;                    // normalized own materials expenditure
  double p_index = 0.0, em_index = 0.0;    // normalized cell price/expenditure
};
ProductivityTriple recover_triple(const RowObservables& row,
                                  const StructuralParams& p, const CesShares& a);

// ---- Static cost minimization (used by the simulator).

struct CostMinState {
  double k_norm = 0.0;
  double w_S = 0.0, w_U = 0.0;             // wages per efficiency unit of headcount
  double p_index = 0.0, em_index = 0.0;    // industry cell: price index, expenditure index
  ProductivityTriple omega;
};

struct CostMinResult {
  double S = 0.0, U = 0.0;     // normalized headcounts
  double E_M = 0.0;            // materials expenditure
  double M = 0.0;              // normalized materials quantity
  double price_M = 0.0;        // plant-level materials price on the supply curve
  double lambda = 0.0;         // marginal cost of output
  double cost = 0.0;           // W_S*S + W_U*U + E_M
};

// Cheapest input bundle producing required_output at fixed capital, on the
// upward-sloping materials supply curve. Solved through the exact ratio
// structure of the first-order conditions plus one monotone root-find in
// log materials expenditure.
CostMinResult static_cost_min(const CostMinState& st, double required_output,
                              const StructuralParams& p, const CesShares& a);

// Max relative residual of the three expenditure first-order conditions at a
// candidate solution; diagnostic used by tests and the simulator self-check.
double foc_residual(const CostMinState& st, const CostMinResult& r,
                    const StructuralParams& p, const CesShares& a);

}  // namespace ces
}  // namespace facet
