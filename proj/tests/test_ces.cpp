#include <cmath>

#include "doctest.h"
#include "facet/ces.hpp"
#include "facet/rng.hpp"

using facet::ces::CesShares;
using facet::ces::CostMinResult;
using facet::ces::CostMinState;
using facet::ces::ProductivityTriple;
using facet::ces::StructuralParams;

namespace {

// Benchmark parameter point used throughout: capital wedge, supply elasticity,
// inner and outer nest exponents, with the reported transforms
// 1/(1-rho) = 0.454, 1/(1-theta) = 0.257, eta/(eta+1) = 0.678.
StructuralParams bench_params() {
  StructuralParams p;
  p.tau = 0.0833;
  p.eta_M = 2.106;
  p.theta = -2.8911;
  p.rho = -1.2026;
  return p;
}

CesShares bench_shares() {
  CesShares a;
  a.alpha_K = 0.056;
  a.alpha_M = 0.672;
  a.alpha_L = 0.272;
  a.alpha_S = 0.321;
  a.alpha_U = 0.679;
  return a;
}

}  // namespace

TEST_CASE("parameter validation and reported transforms") {
  StructuralParams p = bench_params();
  p.validate();
  CHECK(p.elasticity_outer() == doctest::Approx(0.454).epsilon(1e-3));
  CHECK(p.elasticity_inner() == doctest::Approx(0.257).epsilon(1e-3));
  CHECK(p.markdown() == doctest::Approx(0.678).epsilon(1e-3));

  StructuralParams bad = p;
  bad.tau = 0.0;
  CHECK_THROWS_AS(bad.validate(), facet::domain_error);
  bad = p;
  bad.eta_M = -1.0;
  CHECK_THROWS_AS(bad.validate(), facet::domain_error);
  bad = p;
  bad.theta = 0.0;
  CHECK_THROWS_AS(bad.validate(), facet::domain_error);
  bad = p;
  bad.rho = 1.5;
  CHECK_THROWS_AS(bad.validate(), facet::domain_error);
}

TEST_CASE("baseline weights from expenditure means") {
  // Symmetric labor bills split the inner nest evenly.
  CesShares a = facet::ces::shares_from_expenditures(1.0, 1.0, 3.0, 0.1);
  CHECK(a.alpha_S == doctest::Approx(0.5));
  CHECK(a.alpha_U == doctest::Approx(0.5));
  // The capital weight is pinned by tau.
  CHECK(a.alpha_K / a.alpha_M == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(a.alpha_K + a.alpha_M + a.alpha_L == doctest::Approx(1.0).epsilon(1e-12));

  // Hand formula at planted means.
  CesShares b = facet::ces::shares_from_expenditures(0.4, 0.6, 2.0, 0.1);
  double denom = 2.0 + 1.0 + 0.1 * 2.0;
  CHECK(b.alpha_M == doctest::Approx(2.0 / denom).epsilon(1e-12));
  CHECK(b.alpha_L == doctest::Approx(1.0 / denom).epsilon(1e-12));
  CHECK(b.alpha_K == doctest::Approx(0.2 / denom).epsilon(1e-12));
  CHECK(b.alpha_S == doctest::Approx(0.4).epsilon(1e-12));

  // The benchmark reported weights are consistent with their own wedge.
  CesShares t2 = bench_shares();
  CHECK(t2.alpha_K / t2.alpha_M == doctest::Approx(0.0833).epsilon(2e-3));

  CHECK_THROWS_AS(facet::ces::shares_from_expenditures(0.0, 1.0, 1.0, 0.1),
                  facet::domain_error);
  CHECK_THROWS_AS(facet::ces::shares_from_expenditures(1.0, 1.0, 1.0, -0.2),
                  facet::domain_error);
}

TEST_CASE("materials supply shifter") {
  CHECK(facet::ces::supply_shifter(1.0, 1.0, 2.106) == doctest::Approx(1.0));
  // Unit supply elasticity: exponent on the expenditure index is exactly 1.
  CHECK(facet::ces::supply_shifter(1.0, 2.0, 1.0) == doctest::Approx(2.0));
  double eta = 2.106;
  double direct = std::pow(1.1, -(1.0 + eta) / eta) * std::pow(0.9, 1.0 / eta);
  CHECK(facet::ces::supply_shifter(1.1, 0.9, eta) ==
        doctest::Approx(direct).epsilon(1e-14));
  CHECK_THROWS_AS(facet::ces::supply_shifter(0.0, 1.0, eta), facet::domain_error);
  CHECK_THROWS_AS(facet::ces::supply_shifter(1.0, 1.0, 0.0), facet::domain_error);

  // Quantity on the supply curve at the baseline point is 1.
  CHECK(facet::ces::materials_quantity(1.0, 1.0, eta) == doctest::Approx(1.0));
  double hmk = eta / (eta + 1.0);
  CHECK(facet::ces::materials_quantity(2.0, 1.0, eta) ==
        doctest::Approx(std::pow(2.0, hmk)).epsilon(1e-14));
}

TEST_CASE("normalized output: baseline, returns to scale, second evaluation") {
  StructuralParams p = bench_params();
  CesShares a = bench_shares();
  ProductivityTriple w0;

  CHECK(facet::ces::output(p, a, 1, 1, 1, 1, w0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(facet::ces::output(p, a, 2, 2, 2, 2, w0) == doctest::Approx(2.0).epsilon(1e-12));

  // Independent evaluation of the nested formula at a random-ish point.
  ProductivityTriple w{0.15, -0.05, 0.22};
  double K = 1.3, M = 0.8, S = 1.7, U = 0.6;
  double inner = a.alpha_S * std::pow(std::exp(w.S) * S, p.theta) +
                 a.alpha_U * std::pow(std::exp(w.U) * U, p.theta);
  double L = std::pow(inner, 1.0 / p.theta);
  double outer = a.alpha_K * std::pow(std::exp(w.H) * K, p.rho) +
                 a.alpha_M * std::pow(std::exp(w.H) * M, p.rho) +
                 a.alpha_L * std::pow(L, p.rho);
  double expect = std::pow(outer, 1.0 / p.rho);
  CHECK(facet::ces::output(p, a, K, M, S, U, w) ==
        doctest::Approx(expect).epsilon(1e-13));

  // Strictly increasing in every input.
  double base = facet::ces::output(p, a, K, M, S, U, w);
  CHECK(facet::ces::output(p, a, K * 1.01, M, S, U, w) > base);
  CHECK(facet::ces::output(p, a, K, M * 1.01, S, U, w) > base);
  CHECK(facet::ces::output(p, a, K, M, S * 1.01, U, w) > base);
  CHECK(facet::ces::output(p, a, K, M, S, U * 1.01, w) > base);

  CHECK_THROWS_AS(facet::ces::output(p, a, -1.0, 1, 1, 1, w0), facet::domain_error);
}

TEST_CASE("output gradient matches central finite differences") {
  StructuralParams p = bench_params();
  CesShares a = bench_shares();
  facet::Rng rng(7);
  for (int i = 0; i < 10; ++i) {
    double K = rng.uniform(0.5, 2.0), M = rng.uniform(0.5, 2.0);
    double S = rng.uniform(0.5, 2.0), U = rng.uniform(0.5, 2.0);
    ProductivityTriple w{rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                         rng.uniform(-0.3, 0.3)};
    auto g = facet::ces::output_gradient(p, a, K, M, S, U, w);
    auto fd = [&](double* slot, double v) {
      double hstep = 1e-5 * std::max(1.0, std::abs(v));
      *slot = v + hstep;
      double up = facet::ces::output(p, a, K, M, S, U, w);
      *slot = v - hstep;
      double dn = facet::ces::output(p, a, K, M, S, U, w);
      *slot = v;
      return (up - dn) / (2.0 * hstep);
    };
    CHECK(g.dK == doctest::Approx(fd(&K, K)).epsilon(1e-7));
    CHECK(g.dM == doctest::Approx(fd(&M, M)).epsilon(1e-7));
    CHECK(g.dS == doctest::Approx(fd(&S, S)).epsilon(1e-7));
    CHECK(g.dU == doctest::Approx(fd(&U, U)).epsilon(1e-7));
  }
}

TEST_CASE("skill-bias inversion") {
  double theta = -2.8911;
  // Expenditure ratio at the weight ratio and equal quantities: neutral point.
  CHECK(facet::ces::recover_omega_B(2.0, 1.0, 1.0, 1.0, theta, 2.0 / 3.0,
                                    1.0 / 3.0) == doctest::Approx(0.0).epsilon(1e-14));
  // Worked case: equal weights, skilled bill twice the unskilled one.
  double wB = facet::ces::recover_omega_B(2.0, 1.0, 1.0, 1.0, theta, 0.5, 0.5);
  CHECK(std::exp(wB) == doctest::Approx(std::pow(2.0, 1.0 / 2.8911)).epsilon(1e-6));
  CHECK(std::exp(wB) == doctest::Approx(1.271).epsilon(1e-3));
  // Swapping the two roles flips the sign.
  double flipped = facet::ces::recover_omega_B(1.0, 2.0, 1.0, 1.0, theta, 0.5, 0.5);
  CHECK(flipped == doctest::Approx(-wB).epsilon(1e-12));
}

TEST_CASE("composite labor") {
  double theta = -2.8911;
  // Equal bills at weight one-half collapse the correction factor to 1.
  CHECK(facet::ces::composite_labor(1.7, 3.0, 3.0, theta, 0.5) ==
        doctest::Approx(1.7).epsilon(1e-14));
  // Linear in the skilled quantity.
  double l1 = facet::ces::composite_labor(1.0, 2.0, 1.0, theta, 0.321);
  double l3 = facet::ces::composite_labor(3.0, 2.0, 1.0, theta, 0.321);
  CHECK(l3 == doctest::Approx(3.0 * l1).epsilon(1e-13));
}

TEST_CASE("Hicks-neutral inversion: baseline identity and level shift") {
  StructuralParams p = bench_params();
  // Weights implied by the wedge: alpha_K = tau * alpha_M, simplex sum 1.
  double kappa = 0.272 / 0.672;  // labor/materials weight ratio
  double alpha_M = 1.0 / (1.0 + p.tau + kappa);
  double h = p.eta_M / (p.eta_M + 1.0);
  // Expenditures sitting exactly at the baseline first-order conditions:
  // labor outlay carries the materials markdown wedge.
  double e_L = kappa / h, e_M = 1.0;
  double y = 0.37;
  double wH = facet::ces::recover_omega_H(y, 1.0, 0.6 * e_L, 0.4 * e_L, e_M,
                                          1.0, p.tau, p.rho, p.eta_M, alpha_M);
  CHECK(wH == doctest::Approx(y).epsilon(1e-12));
  // Planned output shifts pass through one-for-one.
  double wH2 = facet::ces::recover_omega_H(y + 0.1, 1.0, 0.6 * e_L, 0.4 * e_L,
                                           e_M, 1.0, p.tau, p.rho, p.eta_M,
                                           alpha_M);
  CHECK(wH2 - wH == doctest::Approx(0.1).epsilon(1e-12));
}

namespace {

// Shares whose capital weight is consistent with the wedge tau, as the
// inversion chain assumes.
CesShares consistent_shares(double su_split, double kappa, double tau) {
  return facet::ces::shares_from_expenditures(su_split, 1.0 - su_split,
                                              (1.0) / kappa, tau);
}

}  // namespace

TEST_CASE("cost minimization: optimality, symmetry, inversion round trip") {
  StructuralParams p = bench_params();
  facet::Rng rng(99);

  SUBCASE("symmetric inner nest gives equal headcounts") {
    CesShares a = consistent_shares(0.5, 0.4, p.tau);
    CostMinState st;
    st.k_norm = 1.2;
    st.w_S = st.w_U = 0.7;
    st.p_index = 1.0;
    st.em_index = 1.0;
    st.omega = {0.2, 0.1, 0.1};  // equal augmenting terms for the two types
    CostMinResult r = facet::ces::static_cost_min(st, 1.1, p, a);
    CHECK(r.S == doctest::Approx(r.U).epsilon(1e-10));
    CHECK(facet::ces::foc_residual(st, r, p, a) < 1e-8);
  }

  SUBCASE("random instances: FOC residuals and inversion round trip") {
    for (int i = 0; i < 25; ++i) {
      CesShares a = consistent_shares(rng.uniform(0.3, 0.7),
                                      rng.uniform(0.25, 0.6), p.tau);
      CostMinState st;
      st.k_norm = rng.uniform(0.6, 1.8);
      st.w_S = rng.uniform(0.4, 1.2);
      st.w_U = rng.uniform(0.3, 1.0);
      st.p_index = rng.uniform(0.85, 1.2);
      st.em_index = rng.uniform(0.85, 1.2);
      st.omega = {rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                  rng.uniform(-0.3, 0.3)};
      // Stay inside the feasible-output bound at fixed capital.
      double qmax = std::pow(a.alpha_K, 1.0 / p.rho) * std::exp(st.omega.H) *
                    st.k_norm;
      double q_req = rng.uniform(0.35, 0.8) * qmax;
      CostMinResult r = facet::ces::static_cost_min(st, q_req, p, a);
      CHECK(facet::ces::foc_residual(st, r, p, a) < 1e-8);

      // Output constraint is met.
      double q = facet::ces::output(p, a, st.k_norm, r.M, r.S, r.U, st.omega);
      CHECK(q == doctest::Approx(q_req).epsilon(1e-9));

      // Feeding the chosen bundle back through the inversion chain returns
      // the productivity state the bundle was optimal for.
      facet::ces::RowObservables row;
      row.y_planned = std::log(q_req);
      row.k_norm = st.k_norm;
      row.s_norm = r.S;
      row.u_norm = r.U;
      row.e_S = st.w_S * r.S;
      row.e_U = st.w_U * r.U;
      row.e_M = r.E_M;
      row.em_norm = r.E_M;
      row.p_index = st.p_index;
      row.em_index = st.em_index;
      ProductivityTriple got = facet::ces::recover_triple(row, p, a);
      CHECK(got.H == doctest::Approx(st.omega.H).epsilon(1e-8));
      CHECK(got.S == doctest::Approx(st.omega.S).epsilon(1e-8));
      CHECK(got.U == doctest::Approx(st.omega.U).epsilon(1e-8));
      // Chain identities hold by construction.
      CHECK(got.rel_L() == doctest::Approx(got.S - got.H));
      CHECK(got.rel_B() == doctest::Approx(got.U - got.S));
    }
  }

  SUBCASE("cost beats on-constraint perturbations") {
    CesShares a = consistent_shares(0.45, 0.4, p.tau);
    CostMinState st;
    st.k_norm = 1.0;
    st.w_S = 0.8;
    st.w_U = 0.5;
    st.p_index = 1.05;
    st.em_index = 0.95;
    st.omega = {0.1, 0.05, 0.2};
    double q_req = 0.9;
    CostMinResult r = facet::ces::static_cost_min(st, q_req, p, a);
    double phi = facet::ces::supply_shifter(st.p_index, st.em_index, p.eta_M);
    double hmk = p.eta_M / (p.eta_M + 1.0);
    int tried = 0;
    for (int i = 0; i < 400; ++i) {
      double S = r.S * std::exp(rng.uniform(-0.25, 0.25));
      double U = r.U * std::exp(rng.uniform(-0.25, 0.25));
      // Restore the output constraint through materials.
      double inner = a.alpha_S * std::pow(std::exp(st.omega.S) * S, p.theta) +
                     a.alpha_U * std::pow(std::exp(st.omega.U) * U, p.theta);
      double L = std::pow(inner, 1.0 / p.theta);
      double need = std::pow(q_req, p.rho) -
                    a.alpha_K * std::pow(std::exp(st.omega.H) * st.k_norm, p.rho) -
                    a.alpha_L * std::pow(L, p.rho);
      double denom = a.alpha_M * std::exp(p.rho * st.omega.H);
      if (!(need / denom > 0.0)) continue;  // perturbation infeasible
      double M = std::pow(need / denom, 1.0 / p.rho);
      double em = std::pow(M, 1.0 / hmk) / phi;
      double cost = st.w_S * S + st.w_U * U + em;
      CHECK(r.cost <= cost * (1.0 + 1e-9));
      ++tried;
    }
    CHECK(tried > 200);
  }

  SUBCASE("infeasible output at fixed capital is reported") {
    CesShares a = consistent_shares(0.5, 0.4, p.tau);
    CostMinState st;
    st.k_norm = 1.0;
    st.w_S = st.w_U = 0.6;
    st.p_index = st.em_index = 1.0;
    st.omega = {0.0, 0.0, 0.0};
    double qmax = std::pow(a.alpha_K, 1.0 / p.rho);
    CHECK_THROWS_AS(facet::ces::static_cost_min(st, qmax * 1.01, p, a),
                    facet::numerical_error);
  }
}
