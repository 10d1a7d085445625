#include "facet/estimate.hpp"

#include <algorithm>
#include <cmath>

namespace facet {
namespace estimate {

namespace {

constexpr int kBaseCols = 10;

// Log state variables entering the planned-output projection, one row per
// panel observation. Missing log investment (I <= 0) is imputed at the sample
// mean, which is zero after centering.
Eigen::MatrixXd base_columns(const panel::NormalizedPanel& np) {
  const int n = static_cast<int>(np.rows.size());
  Eigen::MatrixXd X(n, kBaseCols);
  for (int i = 0; i < n; ++i) {
    const auto& r = np.rows[static_cast<std::size_t>(i)];
    X(i, 0) = std::log(r.k);
    X(i, 1) = std::log(r.s);
    X(i, 2) = std::log(r.u);
    X(i, 3) = std::log(r.em_own);
    X(i, 4) = std::log(r.w_s);
    X(i, 5) = std::log(r.w_u);
    X(i, 6) = std::log(r.p_index);
    X(i, 7) = std::log(r.em_index);
    X(i, 8) = r.inv_pos ? std::log(r.inv) : 0.0;
    X(i, 9) = std::log((r.e_S + r.e_U) / r.e_M);
  }
  return X;
}

int group_of(const panel::NormalizedPanel::Row& r) {
  if (r.e_next < 0) return -1;
  return 2 * (r.exporter ? 1 : 0) + r.e_next;
}

}  // namespace

FirstStageFit first_stage(const panel::NormalizedPanel& np, int degree) {
  const int n = static_cast<int>(np.rows.size());
  if (n == 0) throw facet::domain_error("empty panel in planned-output projection");

  FirstStageFit fs;
  fs.y.resize(n);
  fs.group.resize(static_cast<std::size_t>(n));
  fs.eligible.assign(static_cast<std::size_t>(n), 0);

  Eigen::MatrixXd base = base_columns(np);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(kBaseCols);
  int n_elig = 0;
  for (int i = 0; i < n; ++i) {
    const auto& r = np.rows[static_cast<std::size_t>(i)];
    fs.y(i) = std::log(r.q);
    fs.group[static_cast<std::size_t>(i)] = group_of(r);
    bool elig = r.inv_pos && r.e_next >= 0;
    fs.eligible[static_cast<std::size_t>(i)] = elig ? 1 : 0;
    if (elig) {
      mean += base.row(i).transpose();
      ++n_elig;
    }
  }
  if (n_elig == 0)
    throw facet::domain_error(
        "no observation has positive investment and known next-year export "
        "status");
  mean /= static_cast<double>(n_elig);
  base.rowwise() -= mean.transpose();
  for (int i = 0; i < n; ++i)
    if (!np.rows[static_cast<std::size_t>(i)].inv_pos) base(i, 8) = 0.0;

  fs.features = numerics::poly_features(base, degree);
  fs.n_cols = static_cast<int>(fs.features.cols());

  std::array<std::vector<int>, 4> members;
  for (int i = 0; i < n; ++i)
    if (fs.eligible[static_cast<std::size_t>(i)])
      members[static_cast<std::size_t>(fs.group[static_cast<std::size_t>(i)])]
          .push_back(i);

  const int min_rows = fs.n_cols + 5;
  std::array<bool, 4> own{};
  for (int g = 0; g < 4; ++g)
    own[static_cast<std::size_t>(g)] =
        static_cast<int>(members[static_cast<std::size_t>(g)].size()) >=
        min_rows;
  fs.pooled = !(own[0] || own[1] || own[2] || own[3]);

  auto fit_rows = [&](const std::vector<int>& rows) {
    Eigen::MatrixXd X(rows.size(), fs.n_cols);
    Eigen::VectorXd y(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      X.row(static_cast<int>(k)) = fs.features.row(rows[k]);
      y(static_cast<int>(k)) = fs.y(rows[k]);
    }
    return numerics::ols(X, y).beta;
  };

  std::vector<int> all_rows;
  for (int i = 0; i < n; ++i)
    if (fs.eligible[static_cast<std::size_t>(i)]) all_rows.push_back(i);
  fs.beta[4] = fit_rows(all_rows);
  for (int g = 0; g < 4; ++g)
    if (own[static_cast<std::size_t>(g)])
      fs.beta[static_cast<std::size_t>(g)] =
          fit_rows(members[static_cast<std::size_t>(g)]);
  // A starved group borrows the continuation surface for its current status
  // (e.g. the exit group borrows the stay-exporter fit). The pooled surface
  // mixes export statuses, and investment shifts with status at a given state,
  // so falling all the way back to it leaks the status shift into recovered
  // productivity; it is used only when the continuation group is starved too.
  for (int g = 0; g < 4; ++g) {
    if (own[static_cast<std::size_t>(g)]) continue;
    int cont = 3 * (g / 2);
    fs.beta[static_cast<std::size_t>(g)] =
        own[static_cast<std::size_t>(cont)]
            ? fs.beta[static_cast<std::size_t>(cont)]
            : fs.beta[4];
  }

  fs.y_hat.resize(n);
  for (int i = 0; i < n; ++i) {
    int g = fs.group[static_cast<std::size_t>(i)];
    // Unknown next-year status (final sample year): predict with the
    // continuation surface for the current status.
    if (g < 0) g = np.rows[static_cast<std::size_t>(i)].exporter ? 3 : 0;
    fs.y_hat(i) = fs.features.row(i).dot(fs.beta[static_cast<std::size_t>(g)]);
  }

  fs.sample_rows = std::move(all_rows);
  for (int i : fs.sample_rows)
    fs.max_abs_residual =
        std::max(fs.max_abs_residual, std::abs(fs.y(i) - fs.y_hat(i)));
  return fs;
}

FirstStageFit first_stage_identity(const panel::NormalizedPanel& np) {
  const int n = static_cast<int>(np.rows.size());
  FirstStageFit fs;
  fs.identity = true;
  fs.y.resize(n);
  fs.y_hat.resize(n);
  fs.group.resize(static_cast<std::size_t>(n));
  fs.eligible.assign(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    fs.y(i) = std::log(np.rows[static_cast<std::size_t>(i)].q);
    fs.y_hat(i) = fs.y(i);
    fs.group[static_cast<std::size_t>(i)] =
        group_of(np.rows[static_cast<std::size_t>(i)]);
  }
  return fs;
}

Eigen::VectorXd FirstStageFit::refit(
    const panel::NormalizedPanel& np,
    const std::vector<int>& plant_multiplicity) const {
  if (identity) return y_hat;
  const int n = static_cast<int>(np.rows.size());
  const int p = n_cols;

  auto weighted_beta = [&](int want_group) {
    Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd xty = Eigen::VectorXd::Zero(p);
    double wsum = 0.0;
    for (int i = 0; i < n; ++i) {
      if (!eligible[static_cast<std::size_t>(i)]) continue;
      if (want_group >= 0 && group[static_cast<std::size_t>(i)] != want_group)
        continue;
      double w = plant_multiplicity[static_cast<std::size_t>(
          np.rows[static_cast<std::size_t>(i)].plant)];
      if (w == 0.0) continue;
      xtx.selfadjointView<Eigen::Lower>().rankUpdate(features.row(i).transpose(),
                                                     w);
      xty += w * y(i) * features.row(i).transpose();
      wsum += w;
    }
    if (wsum < p + 5)
      throw facet::numerical_error(
          "bootstrap replicate leaves too few observations for the "
          "planned-output projection");
    double tr = xtx.trace();
    for (double ridge = 0.0;; ridge = ridge == 0.0 ? 1e-12 : ridge * 100.0) {
      Eigen::MatrixXd A = xtx.selfadjointView<Eigen::Lower>();
      A.diagonal().array() += ridge * tr / p;
      Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
      if (ldlt.info() == Eigen::Success) {
        Eigen::VectorXd b = ldlt.solve(xty);
        if (b.allFinite()) return b;
      }
      if (ridge > 1e-4)
        throw facet::numerical_error(
            "planned-output projection is singular in a bootstrap replicate");
    }
  };

  // A replicate can starve a group even when the full sample does not; apply
  // the same cascade as the full-sample fit (own fit, then the current-status
  // continuation group, then pooled) with resampled weights.
  std::array<double, 4> wn{};
  for (int i = 0; i < n; ++i) {
    if (!eligible[static_cast<std::size_t>(i)]) continue;
    int g = group[static_cast<std::size_t>(i)];
    wn[static_cast<std::size_t>(g)] += plant_multiplicity[static_cast<std::size_t>(
        np.rows[static_cast<std::size_t>(i)].plant)];
  }
  std::array<bool, 4> own{};
  for (int g = 0; g < 4; ++g)
    own[static_cast<std::size_t>(g)] = wn[static_cast<std::size_t>(g)] >= p + 5;

  std::array<Eigen::VectorXd, 5> b;
  b[4] = weighted_beta(-1);
  for (int g = 0; g < 4; ++g)
    if (own[static_cast<std::size_t>(g)])
      b[static_cast<std::size_t>(g)] = weighted_beta(g);
  for (int g = 0; g < 4; ++g) {
    if (own[static_cast<std::size_t>(g)]) continue;
    int cont = 3 * (g / 2);
    b[static_cast<std::size_t>(g)] = own[static_cast<std::size_t>(cont)]
                                         ? b[static_cast<std::size_t>(cont)]
                                         : b[4];
  }

  Eigen::VectorXd out(n);
  for (int i = 0; i < n; ++i) {
    int g = group[static_cast<std::size_t>(i)];
    if (g < 0)
      g = np.rows[static_cast<std::size_t>(i)].exporter ? 3 : 0;  // continuation
    out(i) = features.row(i).dot(b[static_cast<std::size_t>(g)]);
  }
  return out;
}

// ---- Share basis.

ShareBasis share_basis_from_panel(const panel::NormalizedPanel& np) {
  if (np.rows.empty()) throw facet::domain_error("empty panel for share basis");
  double ls = 0.0, lu = 0.0, lm = 0.0;
  for (const auto& r : np.rows) {
    ls += std::log(r.e_S);
    lu += std::log(r.e_U);
    lm += std::log(r.e_M);
  }
  double n = static_cast<double>(np.rows.size());
  ShareBasis b;
  b.log_su_ratio = (ls - lu) / n;
  b.kappa = (std::exp(ls / n) + std::exp(lu / n)) / std::exp(lm / n);
  return b;
}

ShareBasis share_basis_from_shares(const ces::CesShares& a) {
  ShareBasis b;
  b.log_su_ratio = std::log(a.alpha_S / a.alpha_U);
  b.kappa = a.alpha_L / a.alpha_M;
  return b;
}

ces::CesShares shares_from_basis(const ShareBasis& b, double tau) {
  double es = std::exp(b.log_su_ratio);
  return ces::shares_from_expenditures(es, 1.0, (1.0 + es) / b.kappa, tau);
}

// ---- Productivity recovery.

ProductivityPanel recover_productivity(const panel::NormalizedPanel& np,
                                       const FirstStageFit& fs,
                                       const ces::StructuralParams& p,
                                       const ces::CesShares& a) {
  const int n = static_cast<int>(np.rows.size());
  ProductivityPanel out;
  out.omega.resize(n, 3);
  out.y_hat = fs.y_hat;
  for (int i = 0; i < n; ++i) {
    const auto& r = np.rows[static_cast<std::size_t>(i)];
    ces::RowObservables obs;
    obs.y_planned = fs.y_hat(i);
    obs.k_norm = r.k;
    obs.s_norm = r.s;
    obs.u_norm = r.u;
    obs.e_S = r.e_S;
    obs.e_U = r.e_U;
    obs.e_M = r.e_M;
    obs.em_norm = r.em_own;
    obs.p_index = r.p_index;
    obs.em_index = r.em_index;
    ces::ProductivityTriple t = ces::recover_triple(obs, p, a);
    out.omega(i, 0) = t.H;
    out.omega(i, 1) = t.S;
    out.omega(i, 2) = t.U;
  }
  return out;
}

// ---- Moment workspace.

GmmWorkspace::GmmWorkspace(const panel::NormalizedPanel& np,
                           const FirstStageFit& fs, const ShareBasis& basis)
    : basis_(basis), n_plants_(static_cast<int>(np.plant_rows.size())) {
  const int n = static_cast<int>(np.rows.size());
  y_hat_ = fs.y_hat;
  log_k_.resize(n);
  log_s_.resize(n);
  d_su_exp_.resize(n);
  d_su_n_.resize(n);
  d_ls_.resize(n);
  d_lm_.resize(n);
  ratio_lm_.resize(n);
  log_em_own_.resize(n);
  log_p_.resize(n);
  log_em_cell_.resize(n);
  plant_.resize(static_cast<std::size_t>(n));
  exporter_.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto& r = np.rows[static_cast<std::size_t>(i)];
    log_k_(i) = std::log(r.k);
    log_s_(i) = std::log(r.s);
    d_su_exp_(i) = std::log(r.e_U / r.e_S);
    d_su_n_(i) = std::log(r.s / r.u);
    d_ls_(i) = std::log((r.e_S + r.e_U) / r.e_S);
    ratio_lm_(i) = (r.e_S + r.e_U) / r.e_M;
    d_lm_(i) = std::log(ratio_lm_(i));
    log_em_own_(i) = std::log(r.em_own);
    log_p_(i) = std::log(r.p_index);
    log_em_cell_(i) = std::log(r.em_index);
    plant_[static_cast<std::size_t>(i)] = r.plant;
    exporter_[static_cast<std::size_t>(i)] = r.exporter ? 1 : 0;
  }

  for (int i = 0; i < n; ++i) {
    int j = np.rows[static_cast<std::size_t>(i)].next;
    if (j < 0) continue;
    pair_prev_.push_back(i);
    pair_curr_.push_back(j);
  }
  const int np_ = n_pairs();
  if (np_ < 16)
    throw facet::domain_error("too few adjacent-year pairs for the moment fit");
  z_.resize(np_, 8);
  for (int k = 0; k < np_; ++k) {
    int pv = pair_prev_[static_cast<std::size_t>(k)];
    int cu = pair_curr_[static_cast<std::size_t>(k)];
    z_(k, 0) = log_k_(cu);
    z_(k, 1) = d_lm_(pv);
    z_(k, 2) = log_k_(cu);
    z_(k, 3) = d_ls_(pv);
    z_(k, 4) = log_em_own_(pv) - log_p_(pv);
    z_(k, 5) = log_k_(cu);
    z_(k, 6) = -d_su_exp_(pv);
    z_(k, 7) = d_su_n_(pv);
  }

  row_w_ = Eigen::VectorXd::Ones(n);
  pair_w_ = Eigen::VectorXd::Ones(np_);
  omega_.setZero(n, 3);
  xi_.setZero(np_, 3);
}

ces::StructuralParams GmmWorkspace::decode(const Eigen::Vector4d& r) {
  ces::StructuralParams p;
  p.tau = std::exp(r(0));
  p.eta_M = std::exp(r(1));
  p.theta = 1.0 - std::exp(r(2));
  p.rho = 1.0 - std::exp(r(3));
  return p;
}

Eigen::Vector4d GmmWorkspace::encode(const ces::StructuralParams& p) {
  return {std::log(p.tau), std::log(p.eta_M), std::log(1.0 - p.theta),
          std::log(1.0 - p.rho)};
}

void GmmWorkspace::set_plant_multiplicity(const panel::NormalizedPanel& np,
                                          const FirstStageFit& fs,
                                          const std::vector<int>& mult) {
  const int n = n_rows();
  if (mult.empty()) {
    row_w_.setOnes();
    pair_w_.setOnes();
    y_hat_ = fs.y_hat;
    return;
  }
  if (static_cast<int>(mult.size()) != n_plants_)
    throw facet::domain_error("plant multiplicity vector has the wrong length");
  for (int i = 0; i < n; ++i)
    row_w_(i) = mult[static_cast<std::size_t>(plant_[static_cast<std::size_t>(i)])];
  for (int k = 0; k < n_pairs(); ++k)
    pair_w_(k) = row_w_(pair_curr_[static_cast<std::size_t>(k)]);
  y_hat_ = fs.refit(np, mult);
}

void GmmWorkspace::recompute_omega(const ces::StructuralParams& p) const {
  const int n = n_rows();
  const double h = p.markdown();
  const double inv_t = 1.0 / p.theta, inv_r = 1.0 / p.rho;
  const double a_p = -(1.0 + p.eta_M) / p.eta_M, b_p = 1.0 / p.eta_M;
  const double ls = basis_.log_su_ratio;
  const double log_aS = ls - std::log1p(std::exp(ls));
  const double log_aM = -std::log(1.0 + p.tau + basis_.kappa);
  const double log_aM_aL = -std::log(basis_.kappa);
  const double c_L = (log_aM_aL + std::log(h)) * inv_r;
  const double rh = p.rho * h;

  for (int i = 0; i < n; ++i) {
    if (row_w_(i) == 0.0) continue;
    double t = log_em_own_(i) + a_p * log_p_(i) + b_p * log_em_cell_(i);
    double wB = (d_su_exp_(i) + ls) * inv_t + d_su_n_(i);
    double logL = log_s_(i) + (log_aS + d_ls_(i)) * inv_t;
    double wL = c_L + d_lm_(i) * inv_r + h * t - logL;
    double bracket = p.tau * std::exp(p.rho * log_k_(i)) +
                     (1.0 + h * ratio_lm_(i)) * std::exp(rh * t);
    double wH = y_hat_(i) - (log_aM + std::log(bracket)) * inv_r;
    omega_(i, 0) = wH;
    omega_(i, 1) = wH + wL;
    omega_(i, 2) = wH + wL + wB;
  }
  if (!omega_.allFinite())
    throw facet::numerical_error("productivity recovery overflowed");
}

void GmmWorkspace::markov_residuals(const ces::StructuralParams& p) const {
  recompute_omega(p);
  Eigen::Matrix<double, 5, 5> xtx = Eigen::Matrix<double, 5, 5>::Zero();
  Eigen::Matrix<double, 5, 3> xty = Eigen::Matrix<double, 5, 3>::Zero();
  const int np_ = n_pairs();
  for (int k = 0; k < np_; ++k) {
    double w = pair_w_(k);
    if (w == 0.0) continue;
    int pv = pair_prev_[static_cast<std::size_t>(k)];
    int cu = pair_curr_[static_cast<std::size_t>(k)];
    Eigen::Matrix<double, 5, 1> x;
    x << 1.0, omega_(pv, 0), omega_(pv, 1), omega_(pv, 2),
        static_cast<double>(exporter_[static_cast<std::size_t>(pv)]);
    xtx.noalias() += w * x * x.transpose();
    xty.noalias() += w * x * omega_.row(cu);
  }
  Eigen::LDLT<Eigen::Matrix<double, 5, 5>> ldlt(xtx);
  if (ldlt.info() != Eigen::Success)
    throw facet::numerical_error("law-of-motion regression is singular");
  Eigen::Matrix<double, 5, 3> beta = ldlt.solve(xty);
  if (!beta.allFinite())
    throw facet::numerical_error("law-of-motion regression overflowed");
  for (int k = 0; k < np_; ++k) {
    if (pair_w_(k) == 0.0) continue;
    int pv = pair_prev_[static_cast<std::size_t>(k)];
    int cu = pair_curr_[static_cast<std::size_t>(k)];
    Eigen::Matrix<double, 5, 1> x;
    x << 1.0, omega_(pv, 0), omega_(pv, 1), omega_(pv, 2),
        static_cast<double>(exporter_[static_cast<std::size_t>(pv)]);
    xi_.row(k) = (omega_.row(cu).transpose() - beta.transpose() * x).transpose();
  }
}

Eigen::Matrix<double, 8, 1> GmmWorkspace::moments(const Eigen::Vector4d& r) const {
  ces::StructuralParams p = decode(r);
  p.validate();
  markov_residuals(p);
  Eigen::Matrix<double, 8, 1> m = Eigen::Matrix<double, 8, 1>::Zero();
  double wsum = 0.0;
  const int np_ = n_pairs();
  for (int k = 0; k < np_; ++k) {
    double w = pair_w_(k);
    if (w == 0.0) continue;
    wsum += w;
    double xh = xi_(k, 0), xs = xi_(k, 1), xu = xi_(k, 2);
    m(0) += w * xh * z_(k, 0);
    m(1) += w * xh * z_(k, 1);
    m(2) += w * xs * z_(k, 2);
    m(3) += w * xs * z_(k, 3);
    m(4) += w * xs * z_(k, 4);
    m(5) += w * xu * z_(k, 5);
    m(6) += w * xu * z_(k, 6);
    m(7) += w * xu * z_(k, 7);
  }
  return m / wsum;
}

double GmmWorkspace::objective(const Eigen::Vector4d& r,
                               const Eigen::Matrix<double, 8, 8>& W) const {
  if (r.cwiseAbs().maxCoeff() > 30.0) return 1e10 + r.squaredNorm();
  try {
    Eigen::Matrix<double, 8, 1> m = moments(r);
    double v = pair_w_.sum() * m.dot(W * m);
    if (!std::isfinite(v)) return 1e10 + r.squaredNorm();
    return v;
  } catch (const facet::error&) {
    return 1e10 + r.squaredNorm();
  }
}

Eigen::Matrix<double, 8, 8> GmmWorkspace::weight_from_clustered_cov(
    const Eigen::Vector4d& r) const {
  Eigen::Matrix<double, 8, 1> m = moments(r);
  Eigen::Matrix<double, 8, 8> S = Eigen::Matrix<double, 8, 8>::Zero();
  Eigen::Matrix<double, 8, 1> g = Eigen::Matrix<double, 8, 1>::Zero();
  const int np_ = n_pairs();
  int current = -1;
  auto flush = [&]() {
    S.selfadjointView<Eigen::Lower>().rankUpdate(g, 1.0);
    g.setZero();
  };
  for (int k = 0; k < np_; ++k) {
    int pl = plant_[static_cast<std::size_t>(
        pair_curr_[static_cast<std::size_t>(k)])];
    if (pl != current) {
      if (current >= 0) flush();
      current = pl;
    }
    double xh = xi_(k, 0), xs = xi_(k, 1), xu = xi_(k, 2);
    Eigen::Matrix<double, 8, 1> u;
    u << xh * z_(k, 0), xh * z_(k, 1), xs * z_(k, 2), xs * z_(k, 3),
        xs * z_(k, 4), xu * z_(k, 5), xu * z_(k, 6), xu * z_(k, 7);
    g += u - m;
  }
  if (current >= 0) flush();
  S = Eigen::Matrix<double, 8, 8>(S.selfadjointView<Eigen::Lower>()) /
      static_cast<double>(np_);

  double tr = S.trace();
  for (double ridge = 0.0;; ridge = ridge == 0.0 ? 1e-12 : ridge * 100.0) {
    Eigen::Matrix<double, 8, 8> A = S;
    A.diagonal().array() += ridge * tr / 8.0;
    Eigen::LLT<Eigen::Matrix<double, 8, 8>> llt(A);
    if (llt.info() == Eigen::Success) {
      Eigen::Matrix<double, 8, 8> W =
          llt.solve(Eigen::Matrix<double, 8, 8>::Identity());
      if (W.allFinite()) return W;
    }
    if (ridge > 1e-4)
      throw facet::numerical_error(
          "clustered moment covariance could not be inverted");
  }
}

MarkovEstimate GmmWorkspace::markov_at(const Eigen::Vector4d& r) const {
  ces::StructuralParams p = decode(r);
  p.validate();
  recompute_omega(p);
  const int np_ = n_pairs();
  Eigen::MatrixXd X(np_, 5);
  Eigen::MatrixXd Y(np_, 3);
  for (int k = 0; k < np_; ++k) {
    int pv = pair_prev_[static_cast<std::size_t>(k)];
    int cu = pair_curr_[static_cast<std::size_t>(k)];
    X(k, 0) = 1.0;
    X(k, 1) = omega_(pv, 0);
    X(k, 2) = omega_(pv, 1);
    X(k, 3) = omega_(pv, 2);
    X(k, 4) = static_cast<double>(exporter_[static_cast<std::size_t>(pv)]);
    Y.row(k) = omega_.row(cu);
  }
  MarkovEstimate me;
  me.n = np_;
  Eigen::MatrixXd resid(np_, 3);
  numerics::OlsOptions opt;
  opt.cov = numerics::CovKind::hc1;
  for (int eq = 0; eq < 3; ++eq) {
    numerics::RegressionFit f = numerics::ols(X, Y.col(eq), opt);
    for (int j = 0; j < 5; ++j) {
      me.coef(eq, j) = f.beta(j);
      me.se(eq, j) = f.se(j);
    }
    resid.col(eq) = f.residuals;
  }
  me.shock_cov = resid.transpose() * resid / static_cast<double>(np_ - 5);
  return me;
}

Eigen::MatrixXd GmmWorkspace::omega_at(const Eigen::Vector4d& r) const {
  ces::StructuralParams p = decode(r);
  p.validate();
  recompute_omega(p);
  return omega_;
}

// ---- Two-step estimation.

Eigen::Vector4d default_start() {
  return {std::log(0.1), std::log(2.0), std::log(3.0), std::log(2.0)};
}

namespace {

// Curvature-direction multistart. The objective is nearly flat in theta once
// the labor nest approaches the Leontief limit, so a single descent can stall
// on a noise wrinkle far from the interior minimum. Descend from a small
// deterministic grid over (theta, rho) starts and keep the best finite
// minimum, preferring minima that preserve complementarity (theta < 0,
// rho < 0) over ones that do not.
template <typename Obj>
numerics::MinimizeResult best_start_minimize(
    const Obj& obj, const std::vector<Eigen::Vector4d>& starts,
    const numerics::MinimizeOptions& mo) {
  numerics::MinimizeOptions explore = mo;
  explore.restarts = 0;
  explore.max_iter = std::min(explore.max_iter, 1500);
  numerics::MinimizeResult best;
  bool have = false;
  bool best_retained = false;
  for (const Eigen::Vector4d& s : starts) {
    numerics::MinimizeResult mr = numerics::minimize(obj, s, explore);
    if (!std::isfinite(mr.f)) continue;
    ces::StructuralParams p = GmmWorkspace::decode(Eigen::Vector4d(mr.x));
    bool retained = p.theta < 0.0 && p.rho < 0.0;
    bool better = !have || (retained && !best_retained) ||
                  (retained == best_retained && mr.f < best.f);
    if (better) {
      best = mr;
      have = true;
      best_retained = retained;
    }
  }
  Eigen::Vector4d polish_from = have ? Eigen::Vector4d(best.x) : starts.front();
  return numerics::minimize(obj, polish_from, mo);
}

std::vector<Eigen::Vector4d> step1_starts() {
  std::vector<Eigen::Vector4d> out;
  out.push_back(default_start());
  const double thetas[] = {-1.5, -3.0, -6.0};
  const double rhos[] = {-0.8, -1.6};
  for (double th : thetas)
    for (double rh : rhos)
      out.push_back({std::log(0.1), std::log(2.0), std::log(1.0 - th),
                     std::log(1.0 - rh)});
  return out;
}

}  // namespace

GmmResult two_step_gmm(const panel::NormalizedPanel& np,
                       const FirstStageFit& fs, const ShareBasis& basis,
                       const EstimationOptions& opt) {
  GmmWorkspace ws(np, fs, basis);
  using W8 = Eigen::Matrix<double, 8, 8>;

  auto obj_with = [&ws](const W8& W) {
    return [&ws, W](const Eigen::VectorXd& x) {
      return ws.objective(Eigen::Vector4d(x), W);
    };
  };

  W8 identity = W8::Identity();
  numerics::MinimizeResult s1 =
      best_start_minimize(obj_with(identity), step1_starts(), opt.step1);
  Eigen::Vector4d r1(s1.x);

  W8 W = ws.weight_from_clustered_cov(r1);
  std::vector<Eigen::Vector4d> s2_starts{r1, default_start()};
  numerics::MinimizeResult s2 =
      best_start_minimize(obj_with(W), s2_starts, opt.step2);
  Eigen::Vector4d r2(s2.x);

  GmmResult out;
  out.params = GmmWorkspace::decode(r2);
  out.r = r2;
  out.basis = basis;
  out.shares = shares_from_basis(basis, out.params.tau);
  out.markov = ws.markov_at(r2);
  out.obj_step1 = s1.f;
  out.obj_step2 = s2.f;
  out.moments = ws.moments(r2);
  out.weight = W;
  out.n_rows = ws.n_rows();
  out.n_pairs = ws.n_pairs();
  out.n_plants = ws.n_plants();
  out.retained = out.params.rho < 0.0 && out.params.theta < 0.0;
  out.elasticity_outer.estimate = out.params.elasticity_outer();
  out.elasticity_inner.estimate = out.params.elasticity_inner();
  out.markdown.estimate = out.params.markdown();
  out.tau.estimate = out.params.tau;

  if (!opt.run_bootstrap || opt.bootstrap_B <= 0) return out;

  GmmWorkspace boot(ws);
  numerics::BootstrapPlan plan;
  plan.B = opt.bootstrap_B;
  plan.seed = opt.bootstrap_seed;
  plan.threads = 1;  // the replicate workspace is mutated in place

  auto estimator = [&](const std::vector<int>& ids,
                       std::uint64_t) -> std::optional<Eigen::VectorXd> {
    std::vector<int> mult(static_cast<std::size_t>(boot.n_plants()), 0);
    for (int id : ids) ++mult[static_cast<std::size_t>(id)];
    boot.set_plant_multiplicity(np, fs, mult);
    numerics::MinimizeResult mr = numerics::minimize(
        [&](const Eigen::VectorXd& x) {
          return boot.objective(Eigen::Vector4d(x), W);
        },
        r2, opt.replicate);
    ces::StructuralParams p = GmmWorkspace::decode(Eigen::Vector4d(mr.x));
    Eigen::VectorXd v(6);
    v << p.elasticity_outer(), p.elasticity_inner(), p.markdown(), p.tau,
        p.theta, p.rho;
    return v;
  };
  auto retain = [](const Eigen::VectorXd& v) { return v(4) < 0.0 && v(5) < 0.0; };

  numerics::BootstrapResult br =
      numerics::cluster_bootstrap(plan, ws.n_plants(), estimator, retain);
  out.bootstrap_B = opt.bootstrap_B;
  out.bootstrap_retained = br.n_retained();
  out.bootstrap_failed = br.n_failed;
  if (out.bootstrap_retained >= 10) {
    Eigen::VectorXd sd = numerics::bootstrap_sd(br);
    auto [lo, hi] = numerics::bootstrap_ci(br, 0.90);
    TransformSummary* slots[4] = {&out.elasticity_outer, &out.elasticity_inner,
                                  &out.markdown, &out.tau};
    for (int j = 0; j < 4; ++j) {
      slots[j]->sd = sd(j);
      slots[j]->lo90 = lo(j);
      slots[j]->hi90 = hi(j);
    }
  }
  return out;
}

}  // namespace estimate
}  // namespace facet
