#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <vector>

#include "facet/common.hpp"

namespace facet {
namespace numerics {

// ---- Least squares.

enum class CovKind { none, classical, hc1, cluster };

struct OlsOptions {
  CovKind cov = CovKind::none;
  const std::vector<int>* clusters = nullptr;  // required for CovKind::cluster
  double rank_tol = 1e-9;
};

struct RegressionFit {
  Eigen::VectorXd beta;       // zeros in dropped positions
  Eigen::VectorXd fitted;
  Eigen::VectorXd residuals;
  Eigen::MatrixXd cov;        // zero rows/cols for dropped positions
  std::vector<int> dropped;   // columns removed as collinear
  int n = 0;
  int rank = 0;
  double sigma2 = 0.0;

  double se(int j) const { return std::sqrt(cov(j, j)); }
};

// Rank-revealing least squares; collinear columns are dropped (coefficient
// pinned at zero) and reported. Cluster covariance uses the CR1 small-sample
// factor, heteroskedasticity-robust uses HC1.
RegressionFit ols(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                  const OlsOptions& opt = {});

// ---- Fixed-effect absorption.

struct AbsorbResult {
  int iterations = 0;
  bool converged = false;
};

// Alternating within-group demeaning of every matrix column over the given
// factor assignments, iterated to max change < tol. With one factor a single
// pass is exact.
AbsorbResult absorb_fixed_effects(Eigen::MatrixXd& cols,
                                  const std::vector<std::vector<int>>& factors,
                                  double tol = 1e-10, int max_iter = 10000);

// ---- Logistic regression.

struct LogitFit {
  Eigen::VectorXd beta;
  Eigen::VectorXd fitted;  // probabilities
  Eigen::MatrixXd cov;     // inverse information
  std::vector<int> dropped;
  int iterations = 0;
  int n = 0;
};

// IRLS with collinear-column dropping. Diverging linear predictors raise a
// numerical error naming separation as the likely cause.
LogitFit logit_irls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                    double tol = 1e-10, int max_iter = 100);

// ---- Polynomial design.

// Monomials of total degree <= degree (1 or 2) in the input columns:
// intercept, linear terms, then products x_i * x_j for i <= j. For p inputs and
// degree 2 the count is 1 + p + p(p+1)/2.
Eigen::MatrixXd poly_features(const Eigen::MatrixXd& X, int degree);

// ---- Derivative-free minimization.

struct MinimizeOptions {
  int max_iter = 4000;         // objective evaluations per start
  double tol = 1e-9;           // simplex diameter threshold
  int restarts = 5;            // jittered starts beyond the first
  double jitter = 0.15;
  double initial_step = 0.25;
  std::uint64_t seed = 12345;
};

struct MinimizeResult {
  Eigen::VectorXd x;
  double f = 0.0;
  int evaluations = 0;
  bool converged = false;
};

// Nelder-Mead simplex with restarts from jittered starts; the first simplex
// contains x0, so the result is never worse than f(x0).
MinimizeResult minimize(const std::function<double(const Eigen::VectorXd&)>& f,
                        const Eigen::VectorXd& x0,
                        const MinimizeOptions& opt = {});

// ---- Clustered bootstrap.

struct BootstrapPlan {
  int B = 200;
  std::uint64_t seed = 0;
  int threads = 0;  // 0 = hardware concurrency
};

struct BootstrapResult {
  // One slot per replicate in replicate order; empty vector marks a failed
  // replicate. Retention flags mark replicates that passed the caller's
  // predicate (failed ones never do).
  std::vector<Eigen::VectorXd> estimates;
  std::vector<char> retained;
  int n_failed = 0;

  int n_retained() const {
    int k = 0;
    for (char c : retained) k += c != 0;
    return k;
  }
};

// Resamples cluster ids with replacement, B times. The estimator receives the
// drawn cluster ids (with multiplicity) plus a replicate-specific RNG seed and
// returns the estimate vector, or nothing when the replicate fails. Replicates
// run on a small thread pool; each owns an RNG substream derived from
// (seed, replicate), so results do not depend on scheduling, and reduction
// happens in replicate order.
BootstrapResult cluster_bootstrap(
    const BootstrapPlan& plan, int n_clusters,
    const std::function<std::optional<Eigen::VectorXd>(
        const std::vector<int>&, std::uint64_t)>& estimator,
    const std::function<bool(const Eigen::VectorXd&)>& retain = {});

// Standard deviation per component over retained replicates.
Eigen::VectorXd bootstrap_sd(const BootstrapResult& r);

// Percentile interval per component over retained replicates (level e.g. 0.90
// gives the 5th and 95th percentiles, linearly interpolated).
std::pair<Eigen::VectorXd, Eigen::VectorXd> bootstrap_ci(
    const BootstrapResult& r, double level);

}  // namespace numerics
}  // namespace facet
