#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <vector>

#include "facet/ces.hpp"
#include "facet/numerics.hpp"
#include "facet/panel.hpp"

namespace facet {
namespace estimate {

// ---- Planned-output projection.
//
// Measured log output = planned log output + measurement error. The projection
// regresses measured log output on a polynomial in the log state variables
// (capital, headcounts, own materials spend, wages, cell price and spend
// indices, investment, labor/materials expenditure ratio), separately within
// the four (export today, export next year) groups.
// A group too small to support the design borrows the surface of the
// continuation group for its current status (3*e) — output planning depends on
// current status far more than on the transition — and only when that group is
// also starved does it use the pooled fit. `pooled` is set when no group
// supports its own fit.

struct FirstStageFit {
  Eigen::VectorXd y_hat;         // planned log output for every panel row
  std::vector<int> sample_rows;  // rows used in estimation (I > 0, next-year
                                 // export status observed)
  std::vector<int> group;        // per row: 2*e + e_next in {0..3}; -1 unknown
                                 // (predicted with the continuation group 3*e)
  bool identity = false;         // y_hat is measured output, no projection
  bool pooled = false;           // no group supported its own fit
  int n_cols = 0;                // polynomial design width
  double max_abs_residual = 0.0;       // over the estimation sample
  Eigen::MatrixXd features;            // n_rows x n_cols centered design
  Eigen::VectorXd y;                   // measured log output per row
  std::array<Eigen::VectorXd, 5> beta;  // four group fits + pooled in slot 4
  std::vector<char> eligible;          // row enters estimation sample

  // Weighted refit of the projection with per-plant multiplicities (cluster
  // bootstrap). Returns planned log output for every row under the refit.
  Eigen::VectorXd refit(const panel::NormalizedPanel& np,
                        const std::vector<int>& plant_multiplicity) const;
};

FirstStageFit first_stage(const panel::NormalizedPanel& np, int degree = 2);

// Pass-through variant for data without measurement error: planned output is
// measured output.
FirstStageFit first_stage_identity(const panel::NormalizedPanel& np);

// ---- Baseline share basis.
//
// Normalized CES weights are pinned by expenditure geometric means plus the
// capital wedge tau. Only two reduced statistics matter: the skilled/unskilled
// expenditure split and the labor/materials expenditure ratio kappa. Holding
// the basis fixed while tau varies keeps the weights on the simplex.

struct ShareBasis {
  double log_su_ratio = 0.0;  // log(Ebar_S / Ebar_U)
  double kappa = 1.0;         // Ebar_L / Ebar_M
};

ShareBasis share_basis_from_panel(const panel::NormalizedPanel& np);
ShareBasis share_basis_from_shares(const ces::CesShares& a);
ces::CesShares shares_from_basis(const ShareBasis& b, double tau);

// ---- Productivity recovery over a panel.

struct ProductivityPanel {
  // Aligned with the normalized panel's rows.
  Eigen::MatrixXd omega;  // n x 3: Hicks-neutral, skilled-augmenting premium
                          // level, unskilled-augmenting level (H, S, U)
  Eigen::VectorXd y_hat;
};

ProductivityPanel recover_productivity(const panel::NormalizedPanel& np,
                                       const FirstStageFit& fs,
                                       const ces::StructuralParams& p,
                                       const ces::CesShares& a);

// ---- Productivity law of motion.

struct MarkovEstimate {
  // One equation per component on regressors (1, H_lag, S_lag, U_lag,
  // export_lag); rows ordered H, S, U.
  Eigen::Matrix<double, 3, 5> coef;
  Eigen::Matrix<double, 3, 5> se;  // heteroskedasticity-robust
  Eigen::Matrix3d shock_cov;       // residual covariance
  int n = 0;
};

// ---- Moment evaluation machinery.
//
// Precomputes every data-only quantity once; evaluating candidate parameters
// touches two exponentials and one log per row. Cluster-bootstrap replicates
// reuse the same arrays through per-plant multiplicity weights.

class GmmWorkspace {
 public:
  GmmWorkspace(const panel::NormalizedPanel& np, const FirstStageFit& fs,
               const ShareBasis& basis);

  int n_rows() const { return static_cast<int>(log_k_.size()); }
  int n_pairs() const { return static_cast<int>(pair_curr_.size()); }
  int n_plants() const { return n_plants_; }
  const ShareBasis& basis() const { return basis_; }

  // Instrument matrix and the (lag row, current row) pairing behind it, in
  // pair order; exposed for diagnostics.
  const Eigen::Matrix<double, Eigen::Dynamic, 8>& instruments() const {
    return z_;
  }
  const std::vector<int>& pair_prev() const { return pair_prev_; }
  const std::vector<int>& pair_curr() const { return pair_curr_; }

  // Internal coordinates r = (log tau, log eta, log(1-theta), log(1-rho)).
  static ces::StructuralParams decode(const Eigen::Vector4d& r);
  static Eigen::Vector4d encode(const ces::StructuralParams& p);

  // Plant multiplicities for a bootstrap replicate; refits the planned-output
  // projection under the weights. Empty vector restores the full sample.
  void set_plant_multiplicity(const panel::NormalizedPanel& np,
                              const FirstStageFit& fs,
                              const std::vector<int>& mult);

  Eigen::Matrix<double, 8, 1> moments(const Eigen::Vector4d& r) const;
  double objective(const Eigen::Vector4d& r,
                   const Eigen::Matrix<double, 8, 8>& W) const;

  // Plant-clustered covariance of the stacked moment vector at r, with a
  // ridge escalated until inversion succeeds. Full sample only.
  Eigen::Matrix<double, 8, 8> weight_from_clustered_cov(
      const Eigen::Vector4d& r) const;

  MarkovEstimate markov_at(const Eigen::Vector4d& r) const;
  Eigen::MatrixXd omega_at(const Eigen::Vector4d& r) const;  // n x 3

 private:
  void recompute_omega(const ces::StructuralParams& p) const;
  void markov_residuals(const ces::StructuralParams& p) const;

  ShareBasis basis_;
  int n_plants_ = 0;

  // Per row.
  Eigen::VectorXd y_hat_, log_k_, log_s_;
  Eigen::VectorXd d_su_exp_;    // log(E_U / E_S)
  Eigen::VectorXd d_su_n_;      // log(S / U), normalized headcounts
  Eigen::VectorXd d_ls_;        // log((E_S + E_U) / E_S)
  Eigen::VectorXd d_lm_;        // log((E_S + E_U) / E_M)
  Eigen::VectorXd ratio_lm_;    // (E_S + E_U) / E_M
  Eigen::VectorXd log_em_own_, log_p_, log_em_cell_;
  std::vector<int> plant_, exporter_;
  Eigen::VectorXd row_w_;       // plant multiplicity per row

  // Per pair (lag row, current row).
  std::vector<int> pair_prev_, pair_curr_;
  Eigen::Matrix<double, Eigen::Dynamic, 8> z_;  // instruments
  Eigen::VectorXd pair_w_;

  // Scratch reused across evaluations.
  mutable Eigen::MatrixXd omega_;  // n x 3
  mutable Eigen::MatrixXd xi_;     // n_pairs x 3
};

// ---- Two-step moment estimation with cluster bootstrap.

struct EstimationOptions {
  numerics::MinimizeOptions step1;
  numerics::MinimizeOptions step2;
  numerics::MinimizeOptions replicate;
  int bootstrap_B = 200;
  std::uint64_t bootstrap_seed = 20260822;
  bool run_bootstrap = true;

  EstimationOptions() {
    step1.restarts = 2;
    step1.tol = 1e-7;
    step1.max_iter = 2000;
    step2.restarts = 2;
    step2.tol = 1e-8;
    step2.max_iter = 2000;
    step2.initial_step = 0.1;
    replicate.restarts = 0;
    replicate.tol = 3e-5;
    replicate.max_iter = 400;
    replicate.initial_step = 0.04;
  }
};

struct TransformSummary {
  double estimate = 0.0;
  double sd = 0.0;
  double lo90 = 0.0, hi90 = 0.0;
};

struct GmmResult {
  ces::StructuralParams params;
  Eigen::Vector4d r = Eigen::Vector4d::Zero();
  ces::CesShares shares;  // at the estimated tau
  ShareBasis basis;
  MarkovEstimate markov;
  double obj_step1 = 0.0, obj_step2 = 0.0;
  Eigen::Matrix<double, 8, 1> moments;
  Eigen::Matrix<double, 8, 8> weight;
  int n_rows = 0, n_pairs = 0, n_plants = 0;
  bool retained = false;  // both nest exponents in the complements region

  int bootstrap_B = 0, bootstrap_retained = 0, bootstrap_failed = 0;
  // Reported transforms: outer and inner substitution elasticities, the
  // materials markdown, and the capital wedge.
  TransformSummary elasticity_outer, elasticity_inner, markdown, tau;
};

Eigen::Vector4d default_start();

GmmResult two_step_gmm(const panel::NormalizedPanel& np,
                       const FirstStageFit& fs, const ShareBasis& basis,
                       const EstimationOptions& opt = {});

}  // namespace estimate
}  // namespace facet
