#include <cmath>
#include <optional>
#include <vector>

#include "doctest.h"
#include "facet/numerics.hpp"
#include "facet/rng.hpp"

using facet::numerics::CovKind;
using facet::numerics::OlsOptions;

namespace {

Eigen::MatrixXd random_matrix(int n, int p, facet::Rng& rng) {
  Eigen::MatrixXd X(n, p);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < p; ++j) X(i, j) = rng.normal();
  return X;
}

}  // namespace

TEST_CASE("least squares: exact fit, intercept mean, second solver") {
  facet::Rng rng(11);

  SUBCASE("exact linear data is reproduced") {
    Eigen::MatrixXd X = random_matrix(20, 3, rng);
    Eigen::Vector3d beta(0.5, -1.2, 2.0);
    Eigen::VectorXd y = X * beta;
    auto fit = facet::numerics::ols(X, y);
    CHECK((fit.beta - beta).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(fit.residuals.cwiseAbs().maxCoeff() < 1e-10);
    CHECK(fit.rank == 3);
  }

  SUBCASE("intercept-only fit returns the mean") {
    Eigen::MatrixXd X = Eigen::MatrixXd::Ones(7, 1);
    Eigen::VectorXd y(7);
    y << 1, 2, 3, 4, 5, 6, 7;
    auto fit = facet::numerics::ols(X, y);
    CHECK(fit.beta(0) == doctest::Approx(4.0).epsilon(1e-14));
  }

  SUBCASE("agrees with an independent least-squares solver") {
    Eigen::MatrixXd X = random_matrix(40, 4, rng);
    Eigen::VectorXd y = X * Eigen::Vector4d(1, -2, 0.3, 0.7);
    for (int i = 0; i < 40; ++i) y(i) += 0.1 * rng.normal();
    auto fit = facet::numerics::ols(X, y);
    Eigen::VectorXd alt = X.colPivHouseholderQr().solve(y);
    CHECK((fit.beta - alt).cwiseAbs().maxCoeff() < 1e-8);
  }

  SUBCASE("collinear column is dropped, fit unchanged") {
    Eigen::MatrixXd X = random_matrix(30, 2, rng);
    Eigen::MatrixXd X3(30, 3);
    X3 << X, X.col(0) + X.col(1);
    Eigen::VectorXd y = X * Eigen::Vector2d(1.0, 2.0);
    for (int i = 0; i < 30; ++i) y(i) += 0.05 * rng.normal();
    auto full = facet::numerics::ols(X, y);
    auto degen = facet::numerics::ols(X3, y);
    CHECK(degen.dropped.size() == 1);
    CHECK(degen.rank == 2);
    CHECK((degen.fitted - full.fitted).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("robust covariance matches hand formulas") {
  facet::Rng rng(13);
  const int n = 24, p = 2;
  Eigen::MatrixXd X(n, p);
  Eigen::VectorXd y(n);
  std::vector<int> cl(n);
  for (int i = 0; i < n; ++i) {
    X(i, 0) = 1.0;
    X(i, 1) = rng.normal();
    y(i) = 0.5 + 0.3 * X(i, 1) + (1.0 + 0.5 * std::abs(X(i, 1))) * rng.normal();
    cl[static_cast<std::size_t>(i)] = i / 4;  // 6 clusters of 4
  }
  Eigen::MatrixXd xtx_inv = (X.transpose() * X).inverse();

  SUBCASE("heteroskedasticity-robust") {
    OlsOptions opt;
    opt.cov = CovKind::hc1;
    auto fit = facet::numerics::ols(X, y, opt);
    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(p, p);
    for (int i = 0; i < n; ++i)
      meat += fit.residuals(i) * fit.residuals(i) * X.row(i).transpose() * X.row(i);
    Eigen::MatrixXd expect =
        (static_cast<double>(n) / (n - p)) * xtx_inv * meat * xtx_inv;
    CHECK((fit.cov - expect).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(fit.se(1) > 0.0);
  }

  SUBCASE("cluster-robust") {
    OlsOptions opt;
    opt.cov = CovKind::cluster;
    opt.clusters = &cl;
    auto fit = facet::numerics::ols(X, y, opt);
    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(p, p);
    for (int g = 0; g < 6; ++g) {
      Eigen::VectorXd s = Eigen::VectorXd::Zero(p);
      for (int i = 0; i < n; ++i)
        if (cl[static_cast<std::size_t>(i)] == g)
          s += fit.residuals(i) * X.row(i).transpose();
      meat += s * s.transpose();
    }
    double G = 6.0;
    double c = G / (G - 1.0) * (n - 1.0) / (n - p);
    Eigen::MatrixXd expect = c * xtx_inv * meat * xtx_inv;
    CHECK((fit.cov - expect).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("fixed-effect absorption") {
  facet::Rng rng(17);

  SUBCASE("single factor equals within-group demeaning") {
    const int n = 30;
    Eigen::MatrixXd cols = random_matrix(n, 2, rng);
    Eigen::MatrixXd manual = cols;
    std::vector<int> f(n);
    for (int i = 0; i < n; ++i) f[static_cast<std::size_t>(i)] = i % 5;
    for (int g = 0; g < 5; ++g) {
      for (int j = 0; j < 2; ++j) {
        double m = 0;
        int c = 0;
        for (int i = 0; i < n; ++i)
          if (f[static_cast<std::size_t>(i)] == g) {
            m += manual(i, j);
            ++c;
          }
        m /= c;
        for (int i = 0; i < n; ++i)
          if (f[static_cast<std::size_t>(i)] == g) manual(i, j) -= m;
      }
    }
    auto res = facet::numerics::absorb_fixed_effects(cols, {f});
    CHECK(res.converged);
    CHECK((cols - manual).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("two-way absorption agrees with explicit dummies") {
    const int n = 50;
    std::vector<int> fa(n), fb(n);
    Eigen::VectorXd x(n), y(n);
    for (int i = 0; i < n; ++i) {
      fa[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(6));
      fb[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(5));
      x(i) = rng.normal();
      y(i) = 1.5 * x(i) + 0.7 * fa[static_cast<std::size_t>(i)] -
             0.4 * fb[static_cast<std::size_t>(i)] + 0.3 * rng.normal();
    }
    // Absorbed slope.
    Eigen::MatrixXd cols(n, 2);
    cols.col(0) = x;
    cols.col(1) = y;
    auto res = facet::numerics::absorb_fixed_effects(cols, {fa, fb});
    CHECK(res.converged);
    auto within = facet::numerics::ols(cols.col(0), cols.col(1));

    // Dummy regression: intercept + x + 5 dummies + 4 dummies.
    Eigen::MatrixXd D = Eigen::MatrixXd::Zero(n, 1 + 1 + 5 + 4);
    for (int i = 0; i < n; ++i) {
      D(i, 0) = 1.0;
      D(i, 1) = x(i);
      int a = fa[static_cast<std::size_t>(i)], b = fb[static_cast<std::size_t>(i)];
      if (a > 0) D(i, 1 + a) = 1.0;
      if (b > 0) D(i, 6 + b) = 1.0;
    }
    auto dummy = facet::numerics::ols(D, y);
    CHECK(within.beta(0) == doctest::Approx(dummy.beta(1)).epsilon(1e-8));
  }
}

TEST_CASE("logistic regression") {
  facet::Rng rng(19);

  SUBCASE("balanced intercept-only data gives a zero intercept") {
    Eigen::MatrixXd X = Eigen::MatrixXd::Ones(10, 1);
    Eigen::VectorXd y(10);
    for (int i = 0; i < 10; ++i) y(i) = i % 2;
    auto fit = facet::numerics::logit_irls(X, y);
    CHECK(std::abs(fit.beta(0)) < 1e-10);
    CHECK(fit.fitted(0) == doctest::Approx(0.5).epsilon(1e-10));
  }

  SUBCASE("planted coefficients recovered within three standard errors") {
    const int n = 10000;
    Eigen::MatrixXd X(n, 3);
    Eigen::VectorXd y(n);
    Eigen::Vector3d beta(0.3, 0.8, -0.5);
    for (int i = 0; i < n; ++i) {
      X(i, 0) = 1.0;
      X(i, 1) = rng.normal();
      X(i, 2) = rng.normal();
      double pr = 1.0 / (1.0 + std::exp(-X.row(i).dot(beta)));
      y(i) = rng.uniform() < pr ? 1.0 : 0.0;
    }
    auto fit = facet::numerics::logit_irls(X, y);
    for (int j = 0; j < 3; ++j) {
      double se = std::sqrt(fit.cov(j, j));
      CHECK(std::abs(fit.beta(j) - beta(j)) < 3.0 * se);
    }
  }

  SUBCASE("perfect separation is reported") {
    const int n = 40;
    Eigen::MatrixXd X(n, 2);
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) {
      X(i, 0) = 1.0;
      X(i, 1) = rng.normal();
      y(i) = X(i, 1) > 0 ? 1.0 : 0.0;
    }
    CHECK_THROWS_AS(facet::numerics::logit_irls(X, y), facet::numerical_error);
  }
}

TEST_CASE("polynomial design columns") {
  Eigen::MatrixXd X(2, 2);
  X << 2.0, 3.0, -1.0, 0.5;
  auto P1 = facet::numerics::poly_features(X, 1);
  CHECK(P1.cols() == 3);
  auto P2 = facet::numerics::poly_features(X, 2);
  REQUIRE(P2.cols() == 6);
  // Order: intercept, linear, then products with i <= j.
  CHECK(P2(0, 0) == 1.0);
  CHECK(P2(0, 1) == 2.0);
  CHECK(P2(0, 2) == 3.0);
  CHECK(P2(0, 3) == 4.0);
  CHECK(P2(0, 4) == 6.0);
  CHECK(P2(0, 5) == 9.0);
  // Ten inputs at degree two: 1 + 10 + 55 columns.
  Eigen::MatrixXd X10 = Eigen::MatrixXd::Random(3, 10);
  CHECK(facet::numerics::poly_features(X10, 2).cols() == 66);
}

TEST_CASE("derivative-free minimizer") {
  SUBCASE("shifted quadratic") {
    Eigen::Vector3d target(1.0, -2.0, 0.5);
    auto f = [&](const Eigen::VectorXd& x) {
      return (x - target).squaredNorm();
    };
    Eigen::VectorXd x0 = Eigen::Vector3d::Zero();
    auto res = facet::numerics::minimize(f, x0);
    CHECK((res.x - target).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(res.converged);
  }

  SUBCASE("banana valley from the classic start") {
    auto f = [](const Eigen::VectorXd& x) {
      double a = 1.0 - x(0);
      double b = x(1) - x(0) * x(0);
      return a * a + 100.0 * b * b;
    };
    Eigen::VectorXd x0(2);
    x0 << -1.2, 1.0;
    auto res = facet::numerics::minimize(f, x0);
    CHECK(std::abs(res.x(0) - 1.0) < 1e-4);
    CHECK(std::abs(res.x(1) - 1.0) < 1e-4);
  }

  SUBCASE("result never worse than the start") {
    auto f = [](const Eigen::VectorXd& x) { return std::abs(x(0)) + 1.0; };
    Eigen::VectorXd x0(1);
    x0 << 0.0;  // already optimal
    auto res = facet::numerics::minimize(f, x0);
    CHECK(res.f <= 1.0 + 1e-15);
  }
}

TEST_CASE("clustered bootstrap") {
  const int G = 200, per = 5, n = G * per;
  facet::Rng rng(23);
  Eigen::VectorXd data(n);
  for (int i = 0; i < n; ++i) data(i) = rng.normal();

  auto mean_estimator = [&](const std::vector<int>& ids,
                            std::uint64_t) -> std::optional<Eigen::VectorXd> {
    double s = 0;
    int c = 0;
    for (int g : ids)
      for (int j = 0; j < per; ++j) {
        s += data(g * per + j);
        ++c;
      }
    Eigen::VectorXd out(1);
    out(0) = s / c;
    return out;
  };

  facet::numerics::BootstrapPlan plan;
  plan.B = 200;
  plan.seed = 5;
  plan.threads = 1;

  SUBCASE("matches the analytic standard error for independent data") {
    auto res = facet::numerics::cluster_bootstrap(plan, G, mean_estimator);
    CHECK(res.n_failed == 0);
    CHECK(res.n_retained() == plan.B);
    double sd_hat = facet::numerics::bootstrap_sd(res)(0);
    double sample_sd = std::sqrt((data.array() - data.mean()).square().sum() / (n - 1));
    double analytic = sample_sd / std::sqrt(static_cast<double>(n));
    CHECK(sd_hat == doctest::Approx(analytic).epsilon(0.20));

    auto [lo, hi] = facet::numerics::bootstrap_ci(res, 0.90);
    CHECK(lo(0) < hi(0));
    // The percentile band should sit near +/- 1.645 bootstrap sd of the mean.
    CHECK(hi(0) - lo(0) == doctest::Approx(2 * 1.645 * sd_hat).epsilon(0.35));
  }

  SUBCASE("identical draws under the same plan") {
    auto r1 = facet::numerics::cluster_bootstrap(plan, G, mean_estimator);
    auto r2 = facet::numerics::cluster_bootstrap(plan, G, mean_estimator);
    REQUIRE(r1.estimates.size() == r2.estimates.size());
    for (std::size_t b = 0; b < r1.estimates.size(); ++b)
      CHECK(r1.estimates[b] == r2.estimates[b]);
  }

  SUBCASE("constant statistic has zero spread") {
    auto constant = [](const std::vector<int>&,
                       std::uint64_t) -> std::optional<Eigen::VectorXd> {
      Eigen::VectorXd out(1);
      out(0) = 42.0;
      return out;
    };
    auto res = facet::numerics::cluster_bootstrap(plan, G, constant);
    CHECK(facet::numerics::bootstrap_sd(res)(0) == 0.0);
  }

  SUBCASE("retention predicate and failed replicates are tracked") {
    int call = 0;
    auto flaky = [&](const std::vector<int>& ids,
                     std::uint64_t) -> std::optional<Eigen::VectorXd> {
      ++call;
      if (ids[0] % 7 == 0) return std::nullopt;  // simulated failure
      Eigen::VectorXd out(1);
      out(0) = static_cast<double>(ids[0]);
      return out;
    };
    auto retain = [](const Eigen::VectorXd& v) { return v(0) < 100.0; };
    auto res = facet::numerics::cluster_bootstrap(plan, G, flaky, retain);
    CHECK(call == plan.B);
    CHECK(res.n_failed > 0);
    CHECK(res.n_retained() < plan.B - res.n_failed);
    for (std::size_t b = 0; b < res.estimates.size(); ++b)
      if (res.retained[b]) CHECK(res.estimates[b](0) < 100.0);
  }
}
