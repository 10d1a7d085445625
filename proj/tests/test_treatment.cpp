#include <cmath>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "doctest.h"
#include "facet/panel.hpp"
#include "facet/synth.hpp"
#include "facet/treatment.hpp"

namespace fs = std::filesystem;
using facet::panel::NormalizedPanel;
using facet::treatment::Cohort;

namespace {

std::string tmp_dir() {
  fs::path d = fs::path("test_tmp") / "treatment";
  fs::create_directories(d);
  return d.string();
}

// Toy normalized panel: one entry per plant gives (industry, export pattern),
// one pattern character per consecutive year. Columns are deterministic
// functions of (plant, year) so balance oracles can be computed by hand.
NormalizedPanel toy_np(const std::vector<std::pair<int, std::string>>& plants,
                       int year0 = 2000) {
  NormalizedPanel np;
  np.n_groups = 1;
  np.baselines.resize(1);
  int max_ind = 0;
  for (const auto& [ind, pat] : plants) max_ind = std::max(max_ind, ind);
  for (int i = 0; i <= max_ind; ++i)
    np.industry_names.push_back(std::to_string(311 + i));

  for (std::size_t p = 0; p < plants.size(); ++p) {
    const auto& [ind, pat] = plants[p];
    np.plant_names.push_back("T" + std::to_string(p));
    std::vector<int> rows;
    for (std::size_t t = 0; t < pat.size(); ++t) {
      NormalizedPanel::Row r;
      r.plant = static_cast<int>(p);
      r.industry = ind;
      r.year = year0 + static_cast<int>(t);
      r.group = 0;
      r.exporter = pat[t] == '1';
      r.e_next = t + 1 < pat.size() ? (pat[t + 1] == '1' ? 1 : 0) : -1;
      double dp = static_cast<double>(p), dt = static_cast<double>(t);
      r.k = std::exp(0.05 * (dp + 1.0) + 0.01 * dt);
      r.s = std::exp(0.02 * dp);
      r.u = std::exp(0.03 * dp);
      r.q = std::exp(0.04 * dp + 0.02 * dt);
      r.w_s = std::exp(0.01 * dp);
      r.w_u = std::exp(0.015 * dp);
      r.inv = 1.0;
      r.inv_pos = true;
      r.em_own = std::exp(0.02 * dt);
      r.p_index = std::exp(0.01 * dt);
      r.em_index = std::exp(0.02 + 0.01 * dt);
      r.e_S = 1.0 + 0.1 * dp;
      r.e_U = 1.2;
      r.e_M = 2.0;
      int idx = static_cast<int>(np.rows.size());
      if (t > 0) {
        r.prev = idx - 1;
        np.rows.back().next = idx;
      }
      rows.push_back(idx);
      np.rows.push_back(r);
    }
    np.plant_rows.push_back(rows);
  }
  return np;
}

int row_of(const NormalizedPanel& np, int plant, int year) {
  for (int idx : np.plant_rows[static_cast<std::size_t>(plant)])
    if (np.rows[static_cast<std::size_t>(idx)].year == year) return idx;
  return -1;
}

NormalizedPanel sim_np(const facet::synth::SimConfig& cfg,
                       const std::string& stem, facet::synth::SimPanel* out) {
  auto sim = facet::synth::simulate(cfg);
  facet::synth::WritePaths paths;
  paths.panel_csv = tmp_dir() + "/" + stem + ".csv";
  facet::synth::write_outputs(sim, paths);
  auto loaded = facet::panel::load_panel(paths.panel_csv);
  facet::panel::PriceInputs pin;
  pin.price_index_csv = tmp_dir() + "/" + stem + "_prices.csv";
  auto agg = facet::panel::industry_aggregates(
      loaded.panel, facet::panel::PriceMode::wti_proxy, pin);
  if (out) *out = std::move(sim);
  return facet::panel::normalize_unit_baseline(loaded.panel, agg);
}

Eigen::MatrixXd truth_omega(const facet::synth::SimPanel& sim) {
  Eigen::MatrixXd om(sim.truth.size(), 3);
  for (std::size_t i = 0; i < sim.truth.size(); ++i) {
    om(static_cast<int>(i), 0) = sim.truth[i].omega_H;
    om(static_cast<int>(i), 1) = sim.truth[i].omega_S;
    om(static_cast<int>(i), 2) = sim.truth[i].omega_U;
  }
  return om;
}

}  // namespace

TEST_CASE("cohort classification") {
  auto np = toy_np({{0, "0000"},    // never
                    {0, "0011"},    // entrant, second-to-last year
                    {0, "1100"},    // already exporting when first seen
                    {0, "0010"},    // entrant even though it later stops
                    {1, "0111"}});  // entrant in the other industry
  auto co = facet::treatment::classify(np);
  CHECK(co.n_never == 1);
  CHECK(co.n_entrant == 3);
  CHECK(co.n_other == 1);
  CHECK(co.status[0] == Cohort::never);
  CHECK(co.status[1] == Cohort::entrant);
  CHECK(co.entry_year[1] == 2002);
  CHECK(co.status[2] == Cohort::other);
  CHECK(co.entry_year[2] == -1);
  CHECK(co.status[3] == Cohort::entrant);
  CHECK(co.entry_year[3] == 2002);
  CHECK(co.entry_year[4] == 2001);
}

TEST_CASE("nearest-neighbor matching on the pre-entry propensity") {
  // Plant 0 is the entrant (enters 2002, pre-year 2001); 1..3 never export.
  auto np = toy_np({{0, "0011"}, {0, "0000"}, {0, "0000"}, {0, "0000"}});
  auto co = facet::treatment::classify(np);
  Eigen::VectorXd score = Eigen::VectorXd::Zero(np.rows.size());
  int pre = row_of(np, 0, 2001);
  score(pre) = 0.18;
  score(row_of(np, 1, 2001)) = 0.10;
  score(row_of(np, 2, 2001)) = 0.20;
  score(row_of(np, 3, 2001)) = 0.90;

  facet::treatment::MatchOptions opt;
  opt.k = 2;
  auto ms = facet::treatment::match(np, co, score, opt);
  REQUIRE(ms.cases.size() == 1);
  CHECK(ms.n_candidates == 3);
  CHECK(ms.n_unmatched == 0);
  const auto& cs = ms.cases[0];
  CHECK(cs.pre_row == pre);
  CHECK(cs.score == 0.18);
  REQUIRE(cs.control_plants.size() == 2);
  CHECK(cs.control_plants[0] == 2);  // |0.20 - 0.18| beats |0.10 - 0.18|
  CHECK(cs.control_plants[1] == 1);
  CHECK(std::abs(cs.control_scores[0] - cs.score) <=
        std::abs(cs.control_scores[1] - cs.score));

  SUBCASE("exact ties break toward the smaller plant id") {
    auto np5 = toy_np(
        {{0, "0011"}, {0, "0000"}, {0, "0000"}, {0, "0000"}, {0, "0000"}});
    auto co5 = facet::treatment::classify(np5);
    Eigen::VectorXd s5 = Eigen::VectorXd::Zero(np5.rows.size());
    // dyadic scores so both distances are exactly 0.125
    s5(row_of(np5, 0, 2001)) = 0.25;
    s5(row_of(np5, 1, 2001)) = 0.75;
    s5(row_of(np5, 2, 2001)) = 0.375;
    s5(row_of(np5, 3, 2001)) = 0.90;
    s5(row_of(np5, 4, 2001)) = 0.125;  // ties plant 2 at distance 0.125
    auto ms5 = facet::treatment::match(np5, co5, s5, opt);
    REQUIRE(ms5.cases.size() == 1);
    CHECK(ms5.cases[0].control_plants[0] == 2);
    CHECK(ms5.cases[0].control_plants[1] == 4);
  }

  SUBCASE("an entrant with no in-industry candidates goes unmatched") {
    auto np2 = toy_np({{1, "0011"}, {0, "0000"}, {0, "0000"}});
    auto co2 = facet::treatment::classify(np2);
    Eigen::VectorXd s2 = Eigen::VectorXd::Zero(np2.rows.size());
    auto ms2 = facet::treatment::match(np2, co2, s2, opt);
    CHECK(ms2.cases.empty());
    CHECK(ms2.n_unmatched == 1);
  }
}

TEST_CASE("pre-entry balance accounting") {
  auto np = toy_np({{0, "0011"}, {0, "0011"}, {0, "0000"}, {0, "0000"},
                    {0, "0000"}});
  Eigen::MatrixXd omega = Eigen::MatrixXd::Zero(np.rows.size(), 3);

  SUBCASE("weighted means follow the one-over-controls rule") {
    // Overwrite log capital with hand values at the 2001 rows.
    double v[5] = {1.0, 2.0, 0.5, 1.5, 1.0};
    for (int p = 0; p < 5; ++p)
      np.rows[static_cast<std::size_t>(row_of(np, p, 2001))].k = std::exp(v[p]);

    facet::treatment::MatchedSet ms;
    facet::treatment::MatchedSet::Case a;
    a.plant = 0;
    a.entry_year = 2002;
    a.pre_row = row_of(np, 0, 2001);
    a.control_plants = {2, 3};
    a.control_pre_rows = {row_of(np, 2, 2001), row_of(np, 3, 2001)};
    a.control_scores = {0.0, 0.0};
    facet::treatment::MatchedSet::Case b = a;
    b.plant = 1;
    b.pre_row = row_of(np, 1, 2001);
    b.control_plants = {4};
    b.control_pre_rows = {row_of(np, 4, 2001)};
    b.control_scores = {0.0};
    ms.cases = {a, b};

    auto tab = facet::treatment::balance_table(np, omega, ms);
    CHECK(tab.n_treated == 2);
    CHECK(tab.control_weight == 2.0);
    REQUIRE(!tab.rows.empty());
    const auto& cap = tab.rows[0];
    CHECK(cap.name == "log_capital");
    CHECK(cap.treated_mean == doctest::Approx(1.5).epsilon(1e-12));
    // (0.5*0.5 + 0.5*1.5 + 1*1.0) / 2
    CHECK(cap.control_mean == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cap.diff == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(std::isfinite(cap.t_stat));
  }

  SUBCASE("identical treated and control values give zero difference") {
    for (auto& r : np.rows) {
      r.k = 2.0;
      r.w_s = 1.1;
      r.w_u = 0.9;
      r.p_index = 1.0;
      r.em_index = 1.0;
    }
    auto co = facet::treatment::classify(np);
    Eigen::VectorXd score = Eigen::VectorXd::Zero(np.rows.size());
    auto ms = facet::treatment::match(np, co, score, {});
    REQUIRE(ms.cases.size() == 2);
    auto tab = facet::treatment::balance_table(np, omega, ms);
    // weighted means of identical values agree only to rounding
    for (const auto& row : tab.rows) {
      CHECK(std::abs(row.diff) < 1e-12);
      CHECK(std::abs(row.t_stat) < 1e-6);
      CHECK(row.p_value > 1.0 - 1e-6);
    }
  }
}

TEST_CASE("matched comparison recovers a planted step exactly") {
  std::vector<std::pair<int, std::string>> spec;
  for (int i = 0; i < 3; ++i) spec.push_back({0, "0011"});
  for (int i = 0; i < 6; ++i) spec.push_back({0, "0000"});
  auto np = toy_np(spec);
  auto co = facet::treatment::classify(np);
  REQUIRE(co.n_entrant == 3);

  Eigen::VectorXd outcome(np.rows.size());
  for (std::size_t i = 0; i < np.rows.size(); ++i) {
    const auto& r = np.rows[i];
    bool post = co.status[static_cast<std::size_t>(r.plant)] == Cohort::entrant &&
                r.year >= co.entry_year[static_cast<std::size_t>(r.plant)];
    outcome(static_cast<int>(i)) = 0.3 * r.plant + (post ? 0.1 : 0.0);
  }
  Eigen::VectorXd score = Eigen::VectorXd::Zero(np.rows.size());

  facet::treatment::DidOptions dopt;
  dopt.min_h = -2;
  dopt.max_h = 1;

  SUBCASE("point estimates, with bands degenerate at the same value") {
    auto res = facet::treatment::matched_did(np, outcome, co, score, {}, dopt);
    REQUIRE(res.horizons == std::vector<int>{-2, -1, 0, 1});
    CHECK(res.effect(0) == 0.0);
    CHECK(res.effect(1) == 0.0);  // reference horizon is identically zero
    CHECK(res.effect(2) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(res.effect(3) == doctest::Approx(0.1).epsilon(1e-12));
    for (int h = 0; h < 4; ++h) CHECK(res.n_cases[static_cast<std::size_t>(h)] == 3);
    // Every bootstrap replicate reproduces the same exact profile.
    CHECK(res.lo(2) == doctest::Approx(0.1).epsilon(1e-9));
    CHECK(res.hi(2) == doctest::Approx(0.1).epsilon(1e-9));
    CHECK(res.lo(1) == 0.0);
    CHECK(res.hi(1) == 0.0);
  }

  SUBCASE("disabling the bootstrap leaves the bands undefined") {
    dopt.bootstrap_B = 0;
    auto res = facet::treatment::matched_did(np, outcome, co, score, {}, dopt);
    CHECK(res.effect(2) == doctest::Approx(0.1).epsilon(1e-12));
    for (int h = 0; h < 4; ++h) {
      CHECK(std::isnan(res.lo(h)));
      CHECK(std::isnan(res.hi(h)));
    }
  }

  SUBCASE("horizons must bracket the entry year") {
    dopt.min_h = 0;
    CHECK_THROWS_AS(
        facet::treatment::matched_did(np, outcome, co, score, {}, dopt),
        facet::config_error);
  }

  SUBCASE("no matched entrants is an error") {
    std::vector<std::pair<int, std::string>> nv(
        6, std::pair<int, std::string>{0, "0000"});
    auto np2 = toy_np(nv);
    auto co2 = facet::treatment::classify(np2);
    Eigen::VectorXd y2 = Eigen::VectorXd::Zero(np2.rows.size());
    Eigen::VectorXd s2 = Eigen::VectorXd::Zero(np2.rows.size());
    CHECK_THROWS_AS(
        facet::treatment::matched_did(np2, y2, co2, s2, {}, dopt),
        facet::domain_error);
  }
}

TEST_CASE("event study") {
  // Staggered entries across two industries, plus never-exporter controls.
  std::vector<std::pair<int, std::string>> spec = {
      {0, "000111"}, {0, "001111"}, {1, "000111"}, {1, "000011"}};
  for (int i = 0; i < 4; ++i) spec.push_back({0, "000000"});
  for (int i = 0; i < 4; ++i) spec.push_back({1, "000000"});

  auto np = toy_np(spec);
  auto co = facet::treatment::classify(np);
  REQUIRE(co.n_entrant == 4);

  SUBCASE("event-time grid skips the reference year") {
    Eigen::VectorXd y = Eigen::VectorXd::Zero(np.rows.size());
    for (std::size_t i = 0; i < np.rows.size(); ++i)
      y(static_cast<int>(i)) = 0.25 * np.rows[i].plant;
    auto res = facet::treatment::event_study(np, y, co, {});
    CHECK(res.event_time ==
          std::vector<int>{-4, -3, -2, 0, 1, 2, 3, 4});
    CHECK(res.n_plants == 12);
    CHECK(res.n_obs == static_cast<int>(np.rows.size()));
    // A plant-constant outcome is fully absorbed.
    for (int j = 0; j < res.coef.size(); ++j)
      CHECK(std::abs(res.coef(j)) < 1e-8);
  }

  SUBCASE("a planted post-entry step is recovered exactly") {
    Eigen::VectorXd y(np.rows.size());
    for (std::size_t i = 0; i < np.rows.size(); ++i) {
      const auto& r = np.rows[i];
      double plant_eff = 0.17 * r.plant - 0.5;
      double cell_eff = 0.07 * r.industry + 0.03 * (r.year - 2000) +
                        0.05 * r.industry * (r.year - 2000);
      bool post = co.status[static_cast<std::size_t>(r.plant)] == Cohort::entrant &&
                  r.year >= co.entry_year[static_cast<std::size_t>(r.plant)];
      y(static_cast<int>(i)) = plant_eff + cell_eff + (post ? 0.2 : 0.0);
    }
    auto res = facet::treatment::event_study(np, y, co, {});
    for (std::size_t j = 0; j < res.event_time.size(); ++j) {
      int k = res.event_time[j];
      if (k == 4) continue;  // no plant reaches this horizon; column dropped
      double want = k >= 0 ? 0.2 : 0.0;
      CHECK(std::abs(res.coef(static_cast<int>(j)) - want) < 1e-7);
    }
  }

  SUBCASE("coefficients depend on event time, not the calendar") {
    Eigen::VectorXd y(np.rows.size());
    for (std::size_t i = 0; i < np.rows.size(); ++i)
      y(static_cast<int>(i)) =
          0.1 * np.rows[i].plant + 0.02 * (np.rows[i].year - 2000) +
          ((i * 2654435761u) % 97) * 0.001;  // deterministic pseudo-noise
    auto a = facet::treatment::event_study(np, y, co, {});
    auto np_late = toy_np(spec, 2005);
    auto co_late = facet::treatment::classify(np_late);
    Eigen::VectorXd y_late(np_late.rows.size());
    for (std::size_t i = 0; i < np_late.rows.size(); ++i)
      y_late(static_cast<int>(i)) =
          0.1 * np_late.rows[i].plant + 0.02 * (np_late.rows[i].year - 2005) +
          ((i * 2654435761u) % 97) * 0.001;
    auto b = facet::treatment::event_study(np_late, y_late, co_late, {});
    REQUIRE(a.event_time == b.event_time);
    for (int j = 0; j < a.coef.size(); ++j)
      CHECK(a.coef(j) == doctest::Approx(b.coef(j)).epsilon(1e-9));
  }

  SUBCASE("window must cover two leads and the entry year") {
    Eigen::VectorXd y = Eigen::VectorXd::Zero(np.rows.size());
    facet::treatment::EventStudyOptions opt;
    opt.max_lead = 1;
    CHECK_THROWS_AS(facet::treatment::event_study(np, y, co, opt),
                    facet::config_error);
  }
}

TEST_CASE("propensity fit rejects starved samples") {
  auto np = toy_np({{0, "0011"}, {0, "0000"}, {0, "0000"}});
  Eigen::MatrixXd omega = Eigen::MatrixXd::Zero(np.rows.size(), 3);
  CHECK_THROWS_AS(facet::treatment::estimate_ccp(np, omega),
                  facet::domain_error);
}

TEST_CASE("propensity fit finds no structure in purely random entry") {
  facet::synth::SimConfig cfg;
  cfg.n_plants = 600;
  cfg.n_years = 8;
  cfg.n_industries = 3;
  cfg.seed = 1201;
  cfg.markov = facet::synth::default_markov();
  cfg.export_choice.intercept = -1.0;
  cfg.export_choice.continuation = 0.0;
  cfg.export_choice.coef_omega_H = 0.0;
  cfg.export_choice.coef_omega_S = 0.0;
  cfg.export_choice.coef_omega_U = 0.0;
  cfg.export_choice.coef_log_k = 0.0;
  cfg.export_choice.initial_rate = 0.4;

  facet::synth::SimPanel sim;
  auto np = sim_np(cfg, "ccp_null", &sim);
  auto fit = facet::treatment::estimate_ccp(np, truth_omega(sim));

  // Slopes on every state variable are zero in truth.
  for (int j = 1; j < fit.logit.beta.size(); ++j) {
    double se = std::sqrt(fit.logit.cov(j, j));
    CHECK(std::abs(fit.logit.beta(j)) < 3.0 * se);
  }
  double se0 = std::sqrt(fit.logit.cov(0, 0));
  CHECK(std::abs(fit.logit.beta(0) - (-1.0)) < 3.0 * se0);
}

TEST_CASE("propensity fit recovers planted entry coefficients") {
  facet::synth::SimConfig cfg;
  cfg.n_plants = 800;
  cfg.n_years = 8;
  cfg.n_industries = 3;
  cfg.seed = 1301;
  cfg.markov = facet::synth::default_markov();

  facet::synth::SimPanel sim;
  auto np = sim_np(cfg, "ccp_rec", &sim);
  auto fit = facet::treatment::estimate_ccp(np, truth_omega(sim));
  REQUIRE(fit.sample_rows.size() > 4000u);

  const auto& xc = cfg.export_choice;
  // Design order: 1, omega_H, omega_S, omega_U, log k, log w_s, log w_u,
  // log p, log spend index, export status, industry dummies.
  double want[10] = {xc.intercept, xc.coef_omega_H, xc.coef_omega_S,
                     xc.coef_omega_U, xc.coef_log_k, 0.0, 0.0, 0.0, 0.0,
                     xc.continuation};
  for (int j = 0; j < 10; ++j) {
    double se = std::sqrt(fit.logit.cov(j, j));
    CHECK(std::abs(fit.logit.beta(j) - want[j]) < 3.0 * se);
  }
  if (fit.industry_dummies)
    for (int j = 10; j < fit.logit.beta.size(); ++j) {
      double se = std::sqrt(fit.logit.cov(j, j));
      CHECK(std::abs(fit.logit.beta(j)) < 3.0 * se);
    }

  // Fitted scores agree with the generator's conditional probabilities on
  // average.
  double md = 0.0;
  for (int i : fit.sample_rows)
    md += fit.score(i) - sim.truth[static_cast<std::size_t>(i)].ccp;
  md /= static_cast<double>(fit.sample_rows.size());
  CHECK(std::abs(md) < 0.01);
}
