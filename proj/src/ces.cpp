#include "facet/ces.hpp"

#include <algorithm>
#include <cmath>

namespace facet {
namespace ces {

CesShares shares_from_expenditures(double ebar_S, double ebar_U, double ebar_M,
                                   double tau) {
  if (!(ebar_S > 0.0) || !(ebar_U > 0.0) || !(ebar_M > 0.0))
    throw facet::domain_error("expenditure geometric means must be positive");
  if (!(tau > 0.0)) throw facet::domain_error("tau must be positive");
  CesShares a;
  a.alpha_S = ebar_S / (ebar_S + ebar_U);
  a.alpha_U = 1.0 - a.alpha_S;
  double ebar_L = ebar_S + ebar_U;
  double denom = ebar_M + ebar_L + tau * ebar_M;
  a.alpha_M = ebar_M / denom;
  a.alpha_L = ebar_L / denom;
  a.alpha_K = tau * ebar_M / denom;
  return a;
}

double output(const StructuralParams& p, const CesShares& a, double K, double M,
              double S, double U, const ProductivityTriple& w) {
  p.validate();
  if (!(K > 0.0) || !(M > 0.0) || !(S > 0.0) || !(U > 0.0))
    throw facet::domain_error("output requires strictly positive inputs");
  double inner = a.alpha_S * std::pow(std::exp(w.S) * S, p.theta) +
                 a.alpha_U * std::pow(std::exp(w.U) * U, p.theta);
  double L = std::pow(inner, 1.0 / p.theta);
  double eH = std::exp(w.H);
  double outer = a.alpha_K * std::pow(eH * K, p.rho) +
                 a.alpha_M * std::pow(eH * M, p.rho) +
                 a.alpha_L * std::pow(L, p.rho);
  return std::pow(outer, 1.0 / p.rho);
}

OutputGradient output_gradient(const StructuralParams& p, const CesShares& a,
                               double K, double M, double S, double U,
                               const ProductivityTriple& w) {
  double inner = a.alpha_S * std::pow(std::exp(w.S) * S, p.theta) +
                 a.alpha_U * std::pow(std::exp(w.U) * U, p.theta);
  double L = std::pow(inner, 1.0 / p.theta);
  double Q = output(p, a, K, M, S, U, w);
  double qpow = std::pow(Q, 1.0 - p.rho);
  double lpow = std::pow(L, p.rho - p.theta);
  OutputGradient g;
  g.dK = qpow * a.alpha_K * std::exp(p.rho * w.H) * std::pow(K, p.rho - 1.0);
  g.dM = qpow * a.alpha_M * std::exp(p.rho * w.H) * std::pow(M, p.rho - 1.0);
  g.dS = qpow * a.alpha_L * lpow * a.alpha_S * std::exp(p.theta * w.S) *
         std::pow(S, p.theta - 1.0);
  g.dU = qpow * a.alpha_L * lpow * a.alpha_U * std::exp(p.theta * w.U) *
         std::pow(U, p.theta - 1.0);
  return g;
}

ProductivityTriple recover_triple(const RowObservables& row,
                                  const StructuralParams& p,
                                  const CesShares& a) {
  p.validate();
  double phi = supply_shifter(row.p_index, row.em_index, p.eta_M);
  double emphi = row.em_norm * phi;
  double wB = recover_omega_B(row.e_S, row.e_U, row.s_norm, row.u_norm, p.theta,
                              a.alpha_S, a.alpha_U);
  double lcomp =
      composite_labor(row.s_norm, row.e_S, row.e_U, p.theta, a.alpha_S);
  double wL = recover_omega_L(row.e_S, row.e_U, row.e_M, emphi, p.rho, p.eta_M,
                              a.alpha_M, a.alpha_L, lcomp);
  double wH = recover_omega_H(row.y_planned, row.k_norm, row.e_S, row.e_U,
                              row.e_M, emphi, p.tau, p.rho, p.eta_M, a.alpha_M);
  ProductivityTriple t;
  t.H = wH;
  t.S = wH + wL;
  t.U = t.S + wB;
  return t;
}

CostMinResult static_cost_min(const CostMinState& st, double required_output,
                              const StructuralParams& p, const CesShares& a) {
  p.validate();
  if (!(required_output > 0.0))
    throw facet::domain_error("required output must be positive");
  if (!(st.k_norm > 0.0) || !(st.w_S > 0.0) || !(st.w_U > 0.0))
    throw facet::domain_error("cost minimization needs positive capital and wages");

  const double theta = p.theta, rho = p.rho, eta = p.eta_M;
  const double h = eta / (eta + 1.0);
  const double wB = st.omega.rel_B(), wL = st.omega.rel_L();

  // With gross complements, output at fixed capital is bounded above by the
  // capital term no matter how large the variable inputs get.
  if (rho < 0.0) {
    double qmax = std::pow(a.alpha_K, 1.0 / rho) * std::exp(st.omega.H) * st.k_norm;
    if (required_output >= qmax * (1.0 - 1e-10))
      throw facet::numerical_error(
          "required output infeasible at fixed capital (gross complements bound)");
  }

  // Inner-nest ratio condition pins U/S in closed form.
  double r = std::pow(
      st.w_S * a.alpha_U * std::exp(theta * wB) / (st.w_U * a.alpha_S),
      1.0 / (1.0 - theta));
  // Composite labor per unit of S.
  double ell =
      std::pow(a.alpha_S + a.alpha_U * std::pow(std::exp(wB) * r, theta),
               1.0 / theta);
  double phi = supply_shifter(st.p_index, st.em_index, eta);
  double wsum = st.w_S + st.w_U * r;  // labor outlay per unit of S

  // Labor/materials ratio condition gives S as a function of E_M.
  auto s_of = [&](double em) {
    double num = a.alpha_L * std::exp(rho * wL) * std::pow(ell, rho) * em;
    double den = a.alpha_M * h * wsum * std::pow(em * phi, rho * h);
    return std::pow(num / den, 1.0 / (1.0 - rho));
  };
  auto logq_of = [&](double x) {
    double em = std::exp(x);
    double S = s_of(em);
    double M = std::pow(em * phi, h);
    return std::log(output(p, a, st.k_norm, M, S, r * S, st.omega));
  };

  double target = std::log(required_output);

  // Bracket the root; log output is strictly increasing in log E_M.
  double lo = 0.0, hi = 0.0;
  {
    double x = std::log(required_output);  // spending scales with output to first order
    double f = logq_of(x) - target;
    double step = 0.5;
    if (f < 0.0) {
      lo = x;
      for (int i = 0; i < 200; ++i) {
        hi = lo + step;
        if (logq_of(hi) - target > 0.0) break;
        lo = hi;
        step *= 2.0;
        if (i == 199)
          throw facet::numerical_error("cost minimization failed to bracket");
      }
    } else {
      hi = x;
      for (int i = 0; i < 200; ++i) {
        lo = hi - step;
        if (logq_of(lo) - target < 0.0) break;
        hi = lo;
        step *= 2.0;
        if (i == 199)
          throw facet::numerical_error("cost minimization failed to bracket");
      }
    }
  }

  // Illinois-damped regula falsi on f(x) = log Q(x) - log Qreq.
  double fa = logq_of(lo) - target, fb = logq_of(hi) - target;
  double x = hi;
  int side = 0;  // which bracket end the previous iteration replaced
  for (int it = 0; it < 200 && hi - lo > 1e-14; ++it) {
    x = (fb * lo - fa * hi) / (fb - fa);
    if (!(x > lo && x < hi)) x = 0.5 * (lo + hi);
    double fx = logq_of(x) - target;
    if (fx == 0.0) {
      lo = hi = x;
      break;
    }
    if (fx < 0.0) {
      if (side == -1) fb *= 0.5;
      lo = x;
      fa = fx;
      side = -1;
    } else {
      if (side == +1) fa *= 0.5;
      hi = x;
      fb = fx;
      side = +1;
    }
  }
  x = 0.5 * (lo + hi);

  CostMinResult res;
  res.E_M = std::exp(x);
  res.S = s_of(res.E_M);
  res.U = r * res.S;
  res.M = std::pow(res.E_M * phi, h);
  res.price_M = res.E_M / res.M;
  res.cost = st.w_S * res.S + st.w_U * res.U + res.E_M;
  double lcomp = ell * res.S;
  double dfoc = a.alpha_K * std::pow(st.k_norm, rho) +
                a.alpha_M * std::pow(res.E_M * phi, rho * h) +
                a.alpha_L * std::pow(std::exp(wL) * lcomp, rho);
  res.lambda = res.E_M * dfoc /
               (h * required_output * a.alpha_M * std::pow(res.E_M * phi, rho * h));
  return res;
}

double foc_residual(const CostMinState& st, const CostMinResult& r,
                    const StructuralParams& p, const CesShares& a) {
  const double theta = p.theta, rho = p.rho, eta = p.eta_M;
  const double h = eta / (eta + 1.0);
  const double wB = st.omega.rel_B(), wL = st.omega.rel_L();
  double phi = supply_shifter(st.p_index, st.em_index, eta);
  double q = output(p, a, st.k_norm, r.M, r.S, r.U, st.omega);
  double lcomp = std::pow(a.alpha_S * std::pow(r.S, theta) +
                              a.alpha_U * std::pow(std::exp(wB) * r.U, theta),
                          1.0 / theta);
  double d = a.alpha_K * std::pow(st.k_norm, rho) +
             a.alpha_M * std::pow(r.E_M * phi, rho * h) +
             a.alpha_L * std::pow(std::exp(wL) * lcomp, rho);
  double base = r.lambda * q / d;
  double labor_outer = a.alpha_L * std::pow(std::exp(wL) * lcomp, rho) /
                       std::pow(lcomp, theta);
  double rhs_S = base * labor_outer * a.alpha_S * std::pow(r.S, theta);
  double rhs_U = base * labor_outer * a.alpha_U * std::pow(std::exp(wB) * r.U, theta);
  double rhs_M = base * a.alpha_M * std::pow(r.E_M * phi, rho * h) * h;
  double out = std::abs(rhs_S / (st.w_S * r.S) - 1.0);
  out = std::max(out, std::abs(rhs_U / (st.w_U * r.U) - 1.0));
  out = std::max(out, std::abs(rhs_M / r.E_M - 1.0));
  return out;
}

}  // namespace ces
}  // namespace facet
