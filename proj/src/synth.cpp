#include "facet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "facet/csv.hpp"
#include "facet/rng.hpp"

namespace facet {
namespace synth {

void MarkovProcess::validate() const {
  Eigen::EigenSolver<Eigen::Matrix3d> es(lag, false);
  double radius = es.eigenvalues().cwiseAbs().maxCoeff();
  if (!(radius < 1.0))
    throw facet::config_error("productivity process is not stationary (lag "
                              "matrix spectral radius >= 1)");
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> sa(shock_cov);
  if (sa.eigenvalues().minCoeff() < -1e-10)
    throw facet::config_error("shock covariance is not positive semi-definite");
}

MarkovProcess default_markov() {
  MarkovProcess m;
  m.lag << 0.806, -0.002, -0.011,
           0.010,  0.857,  0.049,
           0.008, -0.005,  0.942;
  m.intercept << 0.016, 0.075, 0.091;
  m.export_effect << 0.093, 0.019, 0.078;
  Eigen::Vector3d sd(0.055, 0.045, 0.045);
  Eigen::Matrix3d corr;
  corr << 1.00, 0.25, 0.25,
          0.25, 1.00, 0.25,
          0.25, 0.25, 1.00;
  m.shock_cov = sd.asDiagonal() * corr * sd.asDiagonal();
  return m;
}

void SimConfig::validate() const {
  if (n_plants < 1 || n_years < 2 || n_industries < 1)
    throw facet::config_error("simulation needs >= 1 plant, >= 2 years, >= 1 industry");
  params.validate();
  double outer = shares.alpha_K + shares.alpha_M + shares.alpha_L;
  double inner = shares.alpha_S + shares.alpha_U;
  if (std::abs(outer - 1.0) > 1e-6 || std::abs(inner - 1.0) > 1e-6)
    throw facet::config_error("planted shares must sum to one per nest");
  markov.validate();
  if (!(investment.coef_omega_H > 0.0))
    throw facet::config_error("investment policy must be increasing in omega_H");
  if (!(demand.clip_fraction > 0.0) || !(demand.clip_fraction < 1.0))
    throw facet::config_error("demand clip fraction must lie in (0,1)");
  if (attrition_rate < 0.0 || attrition_rate >= 1.0)
    throw facet::config_error("attrition rate must lie in [0,1)");
  if (measurement_error_sd < 0.0 || machinery_noise_sd < 0.0)
    throw facet::config_error("noise s.d. must be nonnegative");
}

namespace {

// Symmetric PSD square root; tolerates zero covariance.
Eigen::Matrix3d cov_factor(const Eigen::Matrix3d& cov) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> sa(cov);
  Eigen::Vector3d lam = sa.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return sa.eigenvectors() * lam.asDiagonal() * sa.eigenvectors().transpose();
}

// Stationary covariance of the VAR: Sigma = B Sigma B' + Q.
Eigen::Matrix3d stationary_cov(const Eigen::Matrix3d& B, const Eigen::Matrix3d& Q) {
  Eigen::Matrix3d S = Q;
  for (int i = 0; i < 400; ++i) S = B * S * B.transpose() + Q;
  return S;
}

// Initial deterministic mean m0 chosen so the mean of the intercept-driven
// path over the panel years is zero: keeps log quantities centered at the
// normalization baseline even though the planted law of motion has drift.
Eigen::Vector3d centering_start(const MarkovProcess& m, double export_rate,
                                int n_years) {
  Eigen::Vector3d kappa = m.intercept + m.export_effect * export_rate;
  Eigen::Matrix3d Bt = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d A = Eigen::Matrix3d::Zero();
  for (int t = 0; t < n_years; ++t) {
    A += Bt;
    Bt = m.lag * Bt;
  }
  A /= static_cast<double>(n_years);
  Eigen::Matrix3d I = Eigen::Matrix3d::Identity();
  Eigen::Vector3d drift_mean = (I - A) * (I - m.lag).inverse() * kappa;
  return -A.inverse() * drift_mean;
}

struct PlantPath {
  int industry = 0;
  int n_years = 0;  // years actually observed (attrition truncates)
  int entry_year = std::numeric_limits<int>::max();
  std::vector<int> e;  // length n_years + 1 (next-period status decided in t)
  std::vector<Eigen::Vector3d> omega;  // effective (treatment overlay applied)
  std::vector<double> log_k, inv, w_S, w_U, ccp, log_q_plan, eps, machinery;
};

struct CellSolution {
  std::vector<ces::CostMinResult> member;  // aligned with cell member list
  double log_geomean = 0.0;
};

}  // namespace

SimPanel simulate(const SimConfig& cfg) {
  cfg.validate();
  const auto& par = cfg.params;
  const auto& al = cfg.shares;
  const double h = par.markdown();
  const int T = cfg.n_years;

  // Baseline wages implied by the planted shares: at the baseline point the
  // labor FOCs give E_S : E_U = alpha_S : alpha_U, and the materials/labor
  // condition gives E_L / E_M = (alpha_L / alpha_M) / markdown with E_M = 1.
  const double e_L_base = (al.alpha_L / al.alpha_M) / h;
  const double w_S_base = al.alpha_S * e_L_base;
  const double w_U_base = al.alpha_U * e_L_base;

  const Eigen::Matrix3d shock_L = cov_factor(cfg.markov.shock_cov);
  const Eigen::Matrix3d init_cov =
      stationary_cov(cfg.markov.lag, cfg.markov.shock_cov);
  const Eigen::Matrix3d init_L = cov_factor(init_cov);
  const Eigen::Vector3d m0 =
      centering_start(cfg.markov, cfg.approx_export_rate, T);

  const double invest_const =
      std::log(cfg.investment.depreciation) -
      (cfg.investment.coef_export + cfg.investment.coef_export_next) *
          cfg.approx_export_rate;

  Rng master(cfg.seed);

  // Industry price paths come from a dedicated substream so plant streams are
  // unaffected by n_industries.
  std::vector<std::vector<double>> log_price(
      static_cast<std::size_t>(cfg.n_industries), std::vector<double>(T));
  {
    Rng price_rng = master.substream(0x9e3779b97f4a7c15ull);
    double stat_sd = cfg.price.innovation_sd /
                     std::sqrt(1.0 - cfg.price.persistence * cfg.price.persistence);
    for (auto& path : log_price) {
      path[0] = stat_sd * price_rng.normal();
      for (int t = 1; t < T; ++t)
        path[t] = cfg.price.persistence * path[t - 1] +
                  cfg.price.innovation_sd * price_rng.normal();
    }
  }

  double wage_stat_sd =
      cfg.wages.innovation_sd /
      std::sqrt(1.0 - cfg.wages.persistence * cfg.wages.persistence);

  std::vector<PlantPath> plants(static_cast<std::size_t>(cfg.n_plants));
  for (int j = 0; j < cfg.n_plants; ++j) {
    PlantPath& pl = plants[static_cast<std::size_t>(j)];
    pl.industry = j % cfg.n_industries;
    Rng rng = master.substream(static_cast<std::uint64_t>(j) + 1);

    double perm_S = cfg.wages.plant_sd * rng.normal();
    double perm_U = cfg.wages.plant_sd * rng.normal();
    double dev_S = wage_stat_sd * rng.normal();
    double dev_U = wage_stat_sd * rng.normal();
    Eigen::Vector3d z(rng.normal(), rng.normal(), rng.normal());
    Eigen::Vector3d omega = m0 + init_L * z;
    double log_k =
        cfg.initial_log_k_mean + cfg.initial_log_k_sd * rng.normal();
    int e_now = rng.bernoulli(cfg.export_choice.initial_rate) ? 1 : 0;

    pl.n_years = T;
    pl.e.resize(static_cast<std::size_t>(T) + 1);
    pl.e[0] = e_now;
    for (int t = 0; t < T; ++t) {
      if (pl.e[static_cast<std::size_t>(t)] == 1 && pl.entry_year > t)
        pl.entry_year = t;
      bool post = t >= pl.entry_year;
      Eigen::Vector3d eff = omega;
      if (post) eff[2] += cfg.treatment_effect_U;

      pl.omega.push_back(eff);
      pl.log_k.push_back(log_k);
      pl.w_S.push_back(w_S_base * std::exp(perm_S + dev_S));
      pl.w_U.push_back(w_U_base * std::exp(perm_U + dev_U));

      int e_t = pl.e[static_cast<std::size_t>(t)];
      const auto& xc = cfg.export_choice;
      double index = xc.intercept + xc.continuation * e_t +
                     xc.coef_omega_H * eff[0] + xc.coef_omega_S * eff[1] +
                     xc.coef_omega_U * eff[2] + xc.coef_log_k * log_k;
      double ccp = 1.0 / (1.0 + std::exp(-index));
      pl.ccp.push_back(ccp);
      int e_next = rng.uniform() < ccp ? 1 : 0;
      pl.e[static_cast<std::size_t>(t) + 1] = e_next;

      double log_inv = invest_const + cfg.investment.coef_log_k * log_k +
                       cfg.investment.coef_omega_H * eff[0] +
                       cfg.investment.coef_export * e_t +
                       cfg.investment.coef_export_next * e_next;
      pl.inv.push_back(std::exp(log_inv));

      double log_q = cfg.demand.mean_shift + cfg.demand.omega_coupling * eff[0] +
                     cfg.demand.exporter_shift * e_t +
                     cfg.demand.sd * rng.normal();
      if (par.rho < 0.0) {
        // Attainable output is bounded by the capital term when the outer
        // nest is in the complements region; keep demand strictly inside.
        double log_q_max = std::log(al.alpha_K) / par.rho + eff[0] + log_k;
        log_q = std::min(log_q, log_q_max + std::log(cfg.demand.clip_fraction));
      }
      pl.log_q_plan.push_back(log_q);
      pl.eps.push_back(cfg.measurement_error_sd * rng.normal());
      pl.machinery.push_back(std::exp(cfg.machinery_coef_log_k * log_k +
                                      cfg.machinery_step * (post ? 1.0 : 0.0) +
                                      cfg.machinery_noise_sd * rng.normal()));

      // Transition to t+1 (draws happen even for the final year so paths are
      // invariant to n_years truncation of downstream consumers).
      Eigen::Vector3d shock(rng.normal(), rng.normal(), rng.normal());
      omega = cfg.markov.intercept + cfg.markov.lag * omega +
              cfg.markov.export_effect * e_t + shock_L * shock;
      log_k = std::log((1.0 - cfg.investment.depreciation) * std::exp(log_k) +
                       pl.inv.back());
      dev_S = cfg.wages.persistence * dev_S + cfg.wages.innovation_sd * rng.normal();
      dev_U = cfg.wages.persistence * dev_U + cfg.wages.innovation_sd * rng.normal();

      double exit_u = rng.uniform();
      if (t >= 1 && t + 1 < T && exit_u < cfg.attrition_rate) {
        pl.n_years = t + 1;
        break;
      }
    }
  }

  // Industry-year cells: materials expenditures solve a fixed point because
  // the supply shifter moves with the cell geometric mean of expenditures.
  struct Member {
    int plant, t;
  };
  std::map<std::pair<int, int>, std::vector<Member>> cells;
  for (int j = 0; j < cfg.n_plants; ++j) {
    const PlantPath& pl = plants[static_cast<std::size_t>(j)];
    for (int t = 0; t < pl.n_years; ++t)
      cells[{pl.industry, t}].push_back({j, t});
  }

  std::map<std::pair<int, int>, CellSolution> solved;
  SimPanel out;
  for (auto& [key, members] : cells) {
    double price = std::exp(log_price[static_cast<std::size_t>(key.first)]
                                     [static_cast<std::size_t>(key.second)]);
    CellSolution sol;
    sol.member.resize(members.size());
    auto geomean_at = [&](double x) {
      double em_index = std::exp(x);
      double sum_log = 0.0;
      for (std::size_t i = 0; i < members.size(); ++i) {
        const PlantPath& pl = plants[static_cast<std::size_t>(members[i].plant)];
        int t = members[i].t;
        ces::CostMinState st;
        st.k_norm = std::exp(pl.log_k[static_cast<std::size_t>(t)]);
        st.w_S = pl.w_S[static_cast<std::size_t>(t)];
        st.w_U = pl.w_U[static_cast<std::size_t>(t)];
        st.p_index = price;
        st.em_index = em_index;
        const Eigen::Vector3d& o = pl.omega[static_cast<std::size_t>(t)];
        st.omega = {o[0], o[1], o[2]};
        sol.member[i] = ces::static_cost_min(
            st, std::exp(pl.log_q_plan[static_cast<std::size_t>(t)]), par, al);
        sum_log += std::log(sol.member[i].E_M);
      }
      return sum_log / static_cast<double>(members.size());
    };

    double x = 0.0, gap = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 200; ++it) {
      double fa = geomean_at(x);
      gap = std::abs(fa - x);
      if (gap < 1e-13) {
        x = fa;
        break;
      }
      double fb = geomean_at(fa);
      if (std::abs(fb - fa) < 1e-13) {
        x = fb;
        gap = std::abs(fb - fa);
        break;
      }
      double denom = (fb - fa) - (fa - x);
      double candidate = std::abs(denom) > 1e-300
                             ? x - (fa - x) * (fa - x) / denom
                             : fb;
      x = std::isfinite(candidate) && std::abs(candidate) < 50.0 ? candidate : fb;
    }
    if (!(gap < 1e-10))
      throw facet::numerical_error(
          "materials market fixed point did not converge for an industry-year cell");
    sol.log_geomean = x;
    out.max_cell_gap = std::max(out.max_cell_gap, gap);

    // Self-check the first-order conditions on the converged allocations.
    double em_index = std::exp(x);
    for (std::size_t i = 0; i < members.size(); ++i) {
      const PlantPath& pl = plants[static_cast<std::size_t>(members[i].plant)];
      int t = members[i].t;
      ces::CostMinState st;
      st.k_norm = std::exp(pl.log_k[static_cast<std::size_t>(t)]);
      st.w_S = pl.w_S[static_cast<std::size_t>(t)];
      st.w_U = pl.w_U[static_cast<std::size_t>(t)];
      st.p_index = price;
      st.em_index = em_index;
      const Eigen::Vector3d& o = pl.omega[static_cast<std::size_t>(t)];
      st.omega = {o[0], o[1], o[2]};
      out.max_foc_residual = std::max(
          out.max_foc_residual, ces::foc_residual(st, sol.member[i], par, al));
    }
    solved.emplace(key, std::move(sol));
  }

  // Assemble the visible panel plus hidden truth columns.
  panel::Panel& pan = out.panel;
  char buf[32];
  for (int i = 0; i < cfg.n_industries; ++i)
    pan.industry_names.push_back(std::to_string(311 + i));
  std::map<std::pair<int, int>, std::size_t> cursor;  // per-cell member cursor

  for (int j = 0; j < cfg.n_plants; ++j) {
    const PlantPath& pl = plants[static_cast<std::size_t>(j)];
    std::snprintf(buf, sizeof buf, "P%05d", j + 1);
    pan.plant_names.push_back(buf);
    for (int t = 0; t < pl.n_years; ++t) {
      auto key = std::make_pair(pl.industry, t);
      const auto& cell = solved.at(key);
      const auto& memlist = cells.at(key);
      std::size_t& cur = cursor[key];
      // Members were appended in plant order, so the cursor stays aligned.
      while (memlist[cur].plant != j || memlist[cur].t != t) ++cur;
      const ces::CostMinResult& r = cell.member[cur];

      panel::PlantYear row;
      row.plant = j;
      row.industry = pl.industry;
      row.year = 1990 + t;
      row.exporter = pl.e[static_cast<std::size_t>(t)] == 1;
      row.output = std::exp(pl.log_q_plan[static_cast<std::size_t>(t)] +
                            pl.eps[static_cast<std::size_t>(t)]);
      row.capital = std::exp(pl.log_k[static_cast<std::size_t>(t)]);
      row.investment = pl.inv[static_cast<std::size_t>(t)];
      row.s_n = r.S;
      row.u_n = r.U;
      row.e_S = pl.w_S[static_cast<std::size_t>(t)] * r.S;
      row.e_U = pl.w_U[static_cast<std::size_t>(t)] * r.U;
      row.e_M = r.E_M;
      row.machinery = pl.machinery[static_cast<std::size_t>(t)];
      pan.rows.push_back(row);

      TruthRow tr;
      tr.plant_id = buf;
      tr.year = row.year;
      const Eigen::Vector3d& o = pl.omega[static_cast<std::size_t>(t)];
      tr.omega_H = o[0];
      tr.omega_S = o[1];
      tr.omega_U = o[2];
      tr.ccp = pl.ccp[static_cast<std::size_t>(t)];
      tr.planned_log_output = pl.log_q_plan[static_cast<std::size_t>(t)];
      out.truth.push_back(tr);
    }
  }
  pan.has_machinery = true;
  pan.rebuild_index();

  for (int i = 0; i < cfg.n_industries; ++i)
    for (int t = 0; t < T; ++t) {
      PriceRow pr;
      pr.industry_id = pan.industry_names[static_cast<std::size_t>(i)];
      pr.year = 1990 + t;
      pr.price_index =
          std::exp(log_price[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)]);
      out.prices.push_back(pr);
    }
  return out;
}

void write_outputs(const SimPanel& sim, const WritePaths& paths) {
  panel::write_panel(sim.panel, paths.panel_csv);

  auto sibling = [&](const std::string& suffix) {
    std::string stem = paths.panel_csv;
    auto dot = stem.rfind(".csv");
    if (dot != std::string::npos) stem = stem.substr(0, dot);
    return stem + suffix;
  };

  std::string prices_path =
      paths.prices_csv.empty() ? sibling("_prices.csv") : paths.prices_csv;
  {
    CsvWriter w(prices_path);
    w.write_row({"industry_id", "year", "price_index"});
    for (const auto& pr : sim.prices)
      w.write_row({pr.industry_id, std::to_string(pr.year),
                   format_number(pr.price_index)});
  }

  if (!paths.include_truth) return;
  std::string truth_path =
      paths.truth_csv.empty() ? sibling("_truth.csv") : paths.truth_csv;
  CsvWriter w(truth_path);
  w.write_row({"plant_id", "year", "omega_H", "omega_S", "omega_U", "ccp",
               "planned_log_output"});
  for (const auto& tr : sim.truth)
    w.write_row({tr.plant_id, std::to_string(tr.year), format_number(tr.omega_H),
                 format_number(tr.omega_S), format_number(tr.omega_U),
                 format_number(tr.ccp), format_number(tr.planned_log_output)});
}

}  // namespace synth
}  // namespace facet
