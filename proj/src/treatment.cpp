#include "facet/treatment.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace facet {
namespace treatment {

namespace {

Eigen::MatrixXd ccp_design(const panel::NormalizedPanel& np,
                           const Eigen::MatrixXd& omega, bool dummies) {
  const int n = static_cast<int>(np.rows.size());
  const int n_ind = static_cast<int>(np.industry_names.size());
  const int base = 10;
  const int cols = base + (dummies ? std::max(0, n_ind - 1) : 0);
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n, cols);
  for (int i = 0; i < n; ++i) {
    const auto& r = np.rows[static_cast<std::size_t>(i)];
    X(i, 0) = 1.0;
    X(i, 1) = omega(i, 0);
    X(i, 2) = omega(i, 1);
    X(i, 3) = omega(i, 2);
    X(i, 4) = std::log(r.k);
    X(i, 5) = std::log(r.w_s);
    X(i, 6) = std::log(r.w_u);
    X(i, 7) = std::log(r.p_index);
    X(i, 8) = std::log(r.em_index);
    X(i, 9) = r.exporter ? 1.0 : 0.0;
    if (dummies && r.industry > 0) X(i, base + r.industry - 1) = 1.0;
  }
  return X;
}

}  // namespace

CcpFit estimate_ccp(const panel::NormalizedPanel& np,
                    const Eigen::MatrixXd& omega) {
  const int n = static_cast<int>(np.rows.size());
  CcpFit fit;
  for (int i = 0; i < n; ++i)
    if (np.rows[static_cast<std::size_t>(i)].e_next >= 0)
      fit.sample_rows.push_back(i);
  if (fit.sample_rows.size() < 32)
    throw facet::domain_error("too few observations with next-year export "
                              "status for the propensity fit");

  for (bool dummies : {true, false}) {
    Eigen::MatrixXd X_all = ccp_design(np, omega, dummies);
    Eigen::MatrixXd X(fit.sample_rows.size(), X_all.cols());
    Eigen::VectorXd y(fit.sample_rows.size());
    for (std::size_t k = 0; k < fit.sample_rows.size(); ++k) {
      X.row(static_cast<int>(k)) = X_all.row(fit.sample_rows[k]);
      y(static_cast<int>(k)) =
          np.rows[static_cast<std::size_t>(fit.sample_rows[k])].e_next;
    }
    try {
      fit.logit = numerics::logit_irls(X, y);
    } catch (const facet::numerical_error&) {
      if (dummies) continue;  // retry without industry dummies
      throw;
    }
    fit.industry_dummies = dummies;
    Eigen::VectorXd eta = X_all * fit.logit.beta;
    fit.score = (1.0 + (-eta.array()).exp()).inverse().matrix();
    return fit;
  }
  throw facet::numerical_error("propensity fit failed");
}

Cohorts classify(const panel::NormalizedPanel& np) {
  Cohorts c;
  const int n_plants = static_cast<int>(np.plant_rows.size());
  c.status.resize(static_cast<std::size_t>(n_plants), Cohort::other);
  c.entry_year.assign(static_cast<std::size_t>(n_plants), -1);
  for (int p = 0; p < n_plants; ++p) {
    const auto& rows = np.plant_rows[static_cast<std::size_t>(p)];
    if (rows.empty()) continue;
    bool first_exports = np.rows[static_cast<std::size_t>(rows.front())].exporter;
    int entry = -1;
    for (int idx : rows)
      if (np.rows[static_cast<std::size_t>(idx)].exporter) {
        entry = np.rows[static_cast<std::size_t>(idx)].year;
        break;
      }
    if (first_exports) {
      c.status[static_cast<std::size_t>(p)] = Cohort::other;
      ++c.n_other;
    } else if (entry < 0) {
      c.status[static_cast<std::size_t>(p)] = Cohort::never;
      ++c.n_never;
    } else {
      c.status[static_cast<std::size_t>(p)] = Cohort::entrant;
      c.entry_year[static_cast<std::size_t>(p)] = entry;
      ++c.n_entrant;
    }
  }
  return c;
}

namespace {

int row_at(const panel::NormalizedPanel& np, int plant, int year) {
  for (int idx : np.plant_rows[static_cast<std::size_t>(plant)])
    if (np.rows[static_cast<std::size_t>(idx)].year == year) return idx;
  return -1;
}

// Candidate pool entry: a never-exporter observed the year before some entry.
struct Candidate {
  int plant, row;
  double score;
};

// Matching core shared by the full-sample call and bootstrap replicates.
// plant_mult is empty for the full sample; in a replicate, plants appear with
// their drawn multiplicities (an entrant drawn twice contributes two cases, a
// control drawn twice fills two neighbor slots).
MatchedSet build_matches(const panel::NormalizedPanel& np, const Cohorts& co,
                         const Eigen::VectorXd& score, const MatchOptions& opt,
                         const std::vector<int>& plant_mult) {
  const int n_plants = static_cast<int>(np.plant_rows.size());
  auto mult = [&](int p) {
    return plant_mult.empty() ? 1
                              : plant_mult[static_cast<std::size_t>(p)];
  };

  std::map<std::pair<int, int>, std::vector<Candidate>> pool;  // (ind, year)
  MatchedSet ms;
  for (int p = 0; p < n_plants; ++p) {
    if (co.status[static_cast<std::size_t>(p)] != Cohort::never) continue;
    int m = mult(p);
    if (m == 0) continue;
    ms.n_candidates += m;
    for (int idx : np.plant_rows[static_cast<std::size_t>(p)]) {
      const auto& r = np.rows[static_cast<std::size_t>(idx)];
      for (int c = 0; c < m; ++c)
        pool[{r.industry, r.year}].push_back({p, idx, score(idx)});
    }
  }

  for (int p = 0; p < n_plants; ++p) {
    if (co.status[static_cast<std::size_t>(p)] != Cohort::entrant) continue;
    int m = mult(p);
    if (m == 0) continue;
    int entry = co.entry_year[static_cast<std::size_t>(p)];
    int pre = row_at(np, p, entry - 1);
    if (pre < 0) {
      ms.n_unmatched += m;
      continue;
    }
    const auto& r = np.rows[static_cast<std::size_t>(pre)];
    auto it = pool.find({r.industry, entry - 1});
    if (it == pool.end()) {
      ms.n_unmatched += m;
      continue;
    }
    double s = score(pre);
    std::vector<const Candidate*> order;
    order.reserve(it->second.size());
    for (const Candidate& c : it->second) order.push_back(&c);
    std::sort(order.begin(), order.end(),
              [&](const Candidate* a, const Candidate* b) {
                double da = std::abs(a->score - s), db = std::abs(b->score - s);
                if (da != db) return da < db;
                return a->plant < b->plant;
              });
    int take = std::min<int>(opt.k, static_cast<int>(order.size()));
    MatchedSet::Case cs;
    cs.plant = p;
    cs.entry_year = entry;
    cs.pre_row = pre;
    cs.score = s;
    for (int j = 0; j < take; ++j) {
      cs.control_plants.push_back(order[static_cast<std::size_t>(j)]->plant);
      cs.control_pre_rows.push_back(order[static_cast<std::size_t>(j)]->row);
      cs.control_scores.push_back(order[static_cast<std::size_t>(j)]->score);
    }
    for (int c = 0; c < m; ++c) ms.cases.push_back(cs);
  }
  return ms;
}

}  // namespace

MatchedSet match(const panel::NormalizedPanel& np, const Cohorts& cohorts,
                 const Eigen::VectorXd& score, const MatchOptions& opt) {
  return build_matches(np, cohorts, score, opt, {});
}

BalanceTable balance_table(const panel::NormalizedPanel& np,
                           const Eigen::MatrixXd& omega, const MatchedSet& ms) {
  struct Var {
    std::string name;
    std::function<double(int)> value;
  };
  std::vector<Var> vars;
  auto rowv = [&](int i) { return np.rows[static_cast<std::size_t>(i)]; };
  vars.push_back({"log_capital", [&](int i) { return std::log(rowv(i).k); }});
  vars.push_back({"log_wage_skilled",
                  [&](int i) { return std::log(rowv(i).w_s); }});
  vars.push_back({"log_wage_unskilled",
                  [&](int i) { return std::log(rowv(i).w_u); }});
  vars.push_back({"log_cell_price",
                  [&](int i) { return std::log(rowv(i).p_index); }});
  vars.push_back({"log_cell_materials",
                  [&](int i) { return std::log(rowv(i).em_index); }});
  vars.push_back({"omega_H", [&](int i) { return omega(i, 0); }});
  vars.push_back({"omega_S", [&](int i) { return omega(i, 1); }});
  vars.push_back({"omega_U", [&](int i) { return omega(i, 2); }});

  BalanceTable tab;
  tab.n_treated = static_cast<int>(ms.cases.size());
  for (const auto& cs : ms.cases)
    if (!cs.control_pre_rows.empty()) tab.control_weight += 1.0;

  for (const auto& v : vars) {
    double tm = 0.0, ts2 = 0.0;
    int tn = 0;
    for (const auto& cs : ms.cases) {
      double x = v.value(cs.pre_row);
      tm += x;
      ts2 += x * x;
      ++tn;
    }
    double cw = 0.0, cw2 = 0.0, cm = 0.0, cs2 = 0.0;
    for (const auto& cs : ms.cases) {
      if (cs.control_pre_rows.empty()) continue;
      double w = 1.0 / static_cast<double>(cs.control_pre_rows.size());
      for (int r : cs.control_pre_rows) {
        double x = v.value(r);
        cw += w;
        cw2 += w * w;
        cm += w * x;
        cs2 += w * x * x;
      }
    }
    BalanceRow row;
    row.name = v.name;
    if (tn > 1 && cw > 0.0) {
      tm /= tn;
      double tv = (ts2 / tn - tm * tm) * tn / (tn - 1.0);
      cm /= cw;
      double cv = cs2 / cw - cm * cm;
      double n_eff = cw * cw / cw2;
      if (n_eff > 1.0) cv *= n_eff / (n_eff - 1.0);
      row.treated_mean = tm;
      row.control_mean = cm;
      row.diff = tm - cm;
      double denom = tv / tn + cv / std::max(n_eff, 1.0);
      if (denom > 0.0) {
        row.t_stat = row.diff / std::sqrt(denom);
        row.p_value = std::erfc(std::abs(row.t_stat) / std::sqrt(2.0));
      }
    }
    tab.rows.push_back(row);
  }
  return tab;
}

namespace {

// Average treated-minus-control outcome changes by horizon for one matched
// set; empty optional when no case is usable at some horizon.
std::optional<Eigen::VectorXd> did_profile(const panel::NormalizedPanel& np,
                                           const Eigen::VectorXd& y,
                                           const MatchedSet& ms, int min_h,
                                           int max_h) {
  const int H = max_h - min_h + 1;
  Eigen::VectorXd tau = Eigen::VectorXd::Zero(H);
  for (int h = min_h; h <= max_h; ++h) {
    double acc = 0.0;
    int used = 0;
    for (const auto& cs : ms.cases) {
      int target = cs.entry_year + h;
      int tr = row_at(np, cs.plant, target);
      if (tr < 0) continue;
      double dt = y(tr) - y(cs.pre_row);
      double dc = 0.0;
      int nc = 0;
      for (std::size_t j = 0; j < cs.control_pre_rows.size(); ++j) {
        int cr = row_at(np, cs.control_plants[j], target);
        if (cr < 0) continue;
        dc += y(cr) - y(cs.control_pre_rows[j]);
        ++nc;
      }
      if (nc == 0) continue;
      acc += dt - dc / nc;
      ++used;
    }
    if (used == 0) return std::nullopt;
    tau(h - min_h) = acc / used;
  }
  return tau;
}

}  // namespace

DidResult matched_did(const panel::NormalizedPanel& np,
                      const Eigen::VectorXd& outcome, const Cohorts& cohorts,
                      const Eigen::VectorXd& score, const MatchOptions& mopt,
                      const DidOptions& dopt) {
  if (dopt.min_h > -1 || dopt.max_h < 0)
    throw facet::config_error("event horizons must bracket the entry year");
  MatchedSet full = build_matches(np, cohorts, score, mopt, {});
  if (full.cases.empty())
    throw facet::domain_error("no matched export entrants for the comparison");

  const int H = dopt.max_h - dopt.min_h + 1;
  DidResult out;
  for (int h = dopt.min_h; h <= dopt.max_h; ++h) out.horizons.push_back(h);
  auto point = did_profile(np, outcome, full, dopt.min_h, dopt.max_h);
  if (!point)
    throw facet::domain_error(
        "some event horizon has no usable matched entrant");
  out.effect = *point;

  out.n_cases.assign(static_cast<std::size_t>(H), 0);
  for (int h = dopt.min_h; h <= dopt.max_h; ++h)
    for (const auto& cs : full.cases) {
      int tr = row_at(np, cs.plant, cs.entry_year + h);
      if (tr < 0) continue;
      bool any = false;
      for (std::size_t j = 0; j < cs.control_pre_rows.size() && !any; ++j)
        any = row_at(np, cs.control_plants[j], cs.entry_year + h) >= 0;
      if (any) ++out.n_cases[static_cast<std::size_t>(h - dopt.min_h)];
    }

  const int n_plants = static_cast<int>(np.plant_rows.size());
  numerics::BootstrapPlan plan;
  plan.B = dopt.bootstrap_B;
  plan.seed = dopt.seed;
  plan.threads = 1;
  auto estimator = [&](const std::vector<int>& ids,
                       std::uint64_t) -> std::optional<Eigen::VectorXd> {
    std::vector<int> mult(static_cast<std::size_t>(n_plants), 0);
    for (int id : ids) ++mult[static_cast<std::size_t>(id)];
    MatchedSet rep = build_matches(np, cohorts, score, mopt, mult);
    if (rep.cases.empty()) return std::nullopt;
    auto prof = did_profile(np, outcome, rep, dopt.min_h, dopt.max_h);
    if (!prof) return std::nullopt;
    return Eigen::VectorXd(*prof);
  };
  numerics::BootstrapResult br =
      numerics::cluster_bootstrap(plan, n_plants, estimator);
  if (br.n_retained() >= 10) {
    auto [lo, hi] = numerics::bootstrap_ci(br, dopt.ci_level);
    out.lo = lo;
    out.hi = hi;
  } else {
    out.lo = Eigen::VectorXd::Constant(H, std::nan(""));
    out.hi = Eigen::VectorXd::Constant(H, std::nan(""));
  }
  return out;
}

EventStudyResult event_study(const panel::NormalizedPanel& np,
                             const Eigen::VectorXd& outcome,
                             const Cohorts& cohorts,
                             const EventStudyOptions& opt) {
  if (opt.max_lead < 2 || opt.max_lag < 0)
    throw facet::config_error("event window must include leads up to -2 and "
                              "the entry year");
  std::vector<int> ks;
  for (int k = -opt.max_lead; k <= -2; ++k) ks.push_back(k);
  for (int k = 0; k <= opt.max_lag; ++k) ks.push_back(k);
  const int K = static_cast<int>(ks.size());

  std::vector<int> rows;
  const int n_plants = static_cast<int>(np.plant_rows.size());
  std::vector<int> plant_compact(static_cast<std::size_t>(n_plants), -1);
  int next_plant = 0;
  for (int p = 0; p < n_plants; ++p) {
    Cohort st = cohorts.status[static_cast<std::size_t>(p)];
    if (st == Cohort::other) continue;
    plant_compact[static_cast<std::size_t>(p)] = next_plant++;
    for (int idx : np.plant_rows[static_cast<std::size_t>(p)])
      rows.push_back(idx);
  }
  const int n = static_cast<int>(rows.size());
  if (n < K + next_plant + 8)
    throw facet::domain_error("too few plant-years for the event study");

  Eigen::MatrixXd cols = Eigen::MatrixXd::Zero(n, K + 1);
  std::vector<std::vector<int>> factors(2, std::vector<int>(rows.size()));
  std::map<std::pair<int, int>, int> cell_ids;
  int n_entrant_obs = 0;
  for (int i = 0; i < n; ++i) {
    const auto& r = np.rows[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])];
    cols(i, 0) = outcome(rows[static_cast<std::size_t>(i)]);
    if (cohorts.status[static_cast<std::size_t>(r.plant)] == Cohort::entrant) {
      int k = r.year - cohorts.entry_year[static_cast<std::size_t>(r.plant)];
      k = std::clamp(k, -opt.max_lead, opt.max_lag);
      if (k != -1) {
        auto pos = std::find(ks.begin(), ks.end(), k);
        cols(i, 1 + static_cast<int>(pos - ks.begin())) = 1.0;
      }
      ++n_entrant_obs;
    }
    factors[0][static_cast<std::size_t>(i)] =
        plant_compact[static_cast<std::size_t>(r.plant)];
    auto [it, inserted] = cell_ids.try_emplace({r.industry, r.year},
                                               static_cast<int>(cell_ids.size()));
    factors[1][static_cast<std::size_t>(i)] = it->second;
  }
  if (n_entrant_obs == 0)
    throw facet::domain_error("no export entrants in the event-study sample");

  numerics::absorb_fixed_effects(cols, factors);
  Eigen::VectorXd y = cols.col(0);
  Eigen::MatrixXd X = cols.rightCols(K);
  numerics::OlsOptions oo;
  oo.cov = numerics::CovKind::hc1;
  numerics::RegressionFit f = numerics::ols(X, y, oo);

  // The absorbed effects consume degrees of freedom the plain fit cannot see.
  int absorbed = next_plant + static_cast<int>(cell_ids.size()) - 1;
  double num = static_cast<double>(n - f.rank);
  double den = static_cast<double>(n - f.rank - absorbed);
  double scale = den > 0 ? std::sqrt(num / den) : 1.0;

  EventStudyResult out;
  out.event_time = ks;
  out.coef.resize(K);
  out.se.resize(K);
  for (int j = 0; j < K; ++j) {
    out.coef(j) = f.beta(j);
    out.se(j) = f.se(j) * scale;
  }
  out.n_obs = n;
  out.n_plants = next_plant;
  return out;
}

}  // namespace treatment
}  // namespace facet
