#include "facet/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "facet/csv.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace facet {
namespace pipeline {

const std::vector<std::string> kStages = {"simulate", "estimate",  "ccp",
                                          "match",    "did",       "event-study"};

// ---- Configuration file.

namespace {

double to_number(const std::string& section, const std::string& key,
                 const std::string& value) {
  try {
    std::size_t pos = 0;
    double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw config_error("config [" + section + "] " + key +
                       ": expected a number, got '" + value + "'");
  }
}

int to_int(const std::string& section, const std::string& key,
           const std::string& value) {
  double v = to_number(section, key, value);
  if (v != std::floor(v))
    throw config_error("config [" + section + "] " + key +
                       ": expected an integer, got '" + value + "'");
  return static_cast<int>(v);
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

void apply_key(RunConfig& cfg, const std::string& sec, const std::string& key,
               const std::string& val) {
  auto num = [&] { return to_number(sec, key, val); };
  auto integer = [&] { return to_int(sec, key, val); };
  if (sec == "run") {
    if (key == "out") cfg.out_dir = val;
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(num());
    else if (key == "skip_if_fresh") cfg.skip_if_fresh = integer() != 0;
    else throw config_error("unknown config key [" + sec + "] " + key);
    return;
  }
  if (sec == "simulate") {
    auto& s = cfg.sim;
    if (key == "plants") s.n_plants = integer();
    else if (key == "years") s.n_years = integer();
    else if (key == "industries") s.n_industries = integer();
    else if (key == "measurement_error_sd") s.measurement_error_sd = num();
    else if (key == "attrition_rate") s.attrition_rate = num();
    else if (key == "treatment_effect_U") s.treatment_effect_U = num();
    else if (key == "machinery_step") s.machinery_step = num();
    else if (key == "initial_export_rate") s.export_choice.initial_rate = num();
    else if (key == "demand_mean_shift") s.demand.mean_shift = num();
    else if (key == "demand_sd") s.demand.sd = num();
    else if (key == "export_intercept") s.export_choice.intercept = num();
    else if (key == "export_continuation") s.export_choice.continuation = num();
    else if (key == "export_coef_omega_H") s.export_choice.coef_omega_H = num();
    else if (key == "export_coef_omega_S") s.export_choice.coef_omega_S = num();
    else if (key == "export_coef_omega_U") s.export_choice.coef_omega_U = num();
    else if (key == "export_coef_log_k") s.export_choice.coef_log_k = num();
    else if (key == "markov_export_scale") s.markov.export_effect *= num();
    else throw config_error("unknown config key [" + sec + "] " + key);
    return;
  }
  if (sec == "estimate") {
    if (key == "price_index_mode") {
      if (val == "wti") cfg.price_mode = panel::PriceMode::wti_proxy;
      else if (val == "io") cfg.price_mode = panel::PriceMode::io_weighted;
      else if (val == "fitted") cfg.price_mode = panel::PriceMode::fitted;
      else throw config_error("price_index_mode must be wti, io, or fitted");
    } else if (key == "scope") {
      if (val == "global") cfg.scope = panel::Scope::global;
      else if (val == "per_industry") cfg.scope = panel::Scope::per_industry;
      else throw config_error("scope must be global or per_industry");
    } else if (key == "bootstrap_B") cfg.est.bootstrap_B = integer();
    else if (key == "first_stage_degree") cfg.first_stage_degree = integer();
    else if (key == "panel") cfg.panel_csv = val;
    else if (key == "prices") cfg.prices_csv = val;
    else if (key == "io_weights") cfg.io_weights_csv = val;
    else if (key == "wti_series") cfg.wti_csv = val;
    else throw config_error("unknown config key [" + sec + "] " + key);
    return;
  }
  if (sec == "match") {
    if (key == "k") cfg.match.k = integer();
    else throw config_error("unknown config key [" + sec + "] " + key);
    return;
  }
  if (sec == "did") {
    if (key == "min_h") cfg.did.min_h = integer();
    else if (key == "max_h") cfg.did.max_h = integer();
    else if (key == "bootstrap_B") cfg.did.bootstrap_B = integer();
    else if (key == "ci_level") cfg.did.ci_level = num();
    else throw config_error("unknown config key [" + sec + "] " + key);
    return;
  }
  if (sec == "event") {
    if (key == "max_lead") cfg.event.max_lead = integer();
    else if (key == "max_lag") cfg.event.max_lag = integer();
    else throw config_error("unknown config key [" + sec + "] " + key);
    return;
  }
  throw config_error("unknown config section [" + sec + "]");
}

}  // namespace

RunConfig load_config(const std::string& path) {
  RunConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file: " + path);
  std::string line, section = "run";
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw config_error("config line " + std::to_string(lineno) +
                           ": malformed section header");
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw config_error("config line " + std::to_string(lineno) +
                         ": expected key = value");
    apply_key(cfg, section, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return cfg;
}

std::string describe_config(const RunConfig& cfg) {
  // The artifact directory is deliberately absent: it decides where outputs
  // land, not what they contain, and manifests must not depend on it.
  ordered_json j;
  j["seed"] = cfg.seed;
  const auto& s = cfg.sim;
  j["simulate"] = {{"plants", s.n_plants},
                   {"years", s.n_years},
                   {"industries", s.n_industries},
                   {"measurement_error_sd", s.measurement_error_sd},
                   {"attrition_rate", s.attrition_rate},
                   {"treatment_effect_U", s.treatment_effect_U},
                   {"machinery_step", s.machinery_step},
                   {"initial_export_rate", s.export_choice.initial_rate},
                   {"demand_mean_shift", s.demand.mean_shift},
                   {"demand_sd", s.demand.sd},
                   {"export_intercept", s.export_choice.intercept},
                   {"export_continuation", s.export_choice.continuation},
                   {"export_coef_omega_H", s.export_choice.coef_omega_H},
                   {"export_coef_omega_S", s.export_choice.coef_omega_S},
                   {"export_coef_omega_U", s.export_choice.coef_omega_U},
                   {"export_coef_log_k", s.export_choice.coef_log_k},
                   {"markov_export_H", s.markov.export_effect(0)},
                   {"markov_export_S", s.markov.export_effect(1)},
                   {"markov_export_U", s.markov.export_effect(2)}};
  j["estimate"] = {
      {"price_index_mode", cfg.price_mode == panel::PriceMode::wti_proxy
                               ? "wti"
                               : cfg.price_mode == panel::PriceMode::io_weighted
                                     ? "io"
                                     : "fitted"},
      {"scope", cfg.scope == panel::Scope::global ? "global" : "per_industry"},
      {"bootstrap_B", cfg.est.bootstrap_B},
      {"first_stage_degree", cfg.first_stage_degree},
      {"panel", cfg.panel_csv},
      {"prices", cfg.prices_csv},
      {"io_weights", cfg.io_weights_csv},
      {"wti_series", cfg.wti_csv}};
  j["match"] = {{"k", cfg.match.k}};
  j["did"] = {{"min_h", cfg.did.min_h},
              {"max_h", cfg.did.max_h},
              {"bootstrap_B", cfg.did.bootstrap_B},
              {"ci_level", cfg.did.ci_level}};
  j["event"] = {{"max_lead", cfg.event.max_lead}, {"max_lag", cfg.event.max_lag}};
  return j.dump();
}

// ---- Manifests and freshness.

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw dependency_error("missing artifact: " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[65536];
  while (in.read(buf, sizeof buf) || in.gcount() > 0)
    h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
  return hex64(h);
}

std::string manifest_path(const RunConfig& cfg, const std::string& stage) {
  std::string name = stage == "event-study" ? "event_study" : stage;
  return (fs::path(cfg.out_dir) / ("manifest_" + name + ".json")).string();
}

// Files under the artifact directory are recorded by their name inside it, so
// manifests (and hence whole runs) are byte-identical wherever the directory
// lives. External files keep their given path.
std::string artifact_label(const RunConfig& cfg, const std::string& path) {
  fs::path rel = fs::path(path).lexically_relative(fs::path(cfg.out_dir));
  std::string r = rel.string();
  if (r.empty() || r == "." || r.rfind("..", 0) == 0 || rel.is_absolute())
    return path;
  return r;
}

std::string resolve_output_label(const RunConfig& cfg, const std::string& name) {
  fs::path p(name);
  if (p.is_absolute()) return name;
  return (fs::path(cfg.out_dir) / p).string();
}

// A stage is fresh when its manifest records the same effective configuration
// and the same input bytes, and every output it produced still matches.
bool stage_is_fresh(const RunConfig& cfg, const std::string& stage,
                    const std::vector<std::string>& inputs) {
  std::ifstream in(manifest_path(cfg, stage));
  if (!in) return false;
  ordered_json m;
  try {
    in >> m;
  } catch (const std::exception&) {
    return false;
  }
  try {
    if (m.at("config_fingerprint") != hex64(fnv1a64(describe_config(cfg))))
      return false;
    const auto& min = m.at("inputs");
    if (min.size() != inputs.size()) return false;
    for (const auto& p : inputs) {
      if (!fs::exists(p)) return false;
      std::string label = artifact_label(cfg, p);
      if (!min.contains(label) || min.at(label) != hash_file(p)) return false;
    }
    for (const auto& [name, hash] : m.at("outputs").items()) {
      std::string path = resolve_output_label(cfg, name);
      if (!fs::exists(path)) return false;
      if (hash != hash_file(path)) return false;
    }
  } catch (const std::exception&) {
    return false;
  }
  return true;
}

void write_manifest(const RunConfig& cfg, const std::string& stage,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs,
                    const ordered_json& counts) {
  ordered_json m;
  m["stage"] = stage;
  m["tool_version"] = kVersion;
  m["seed"] = cfg.seed;
  m["config_fingerprint"] = hex64(fnv1a64(describe_config(cfg)));
  m["config"] = ordered_json::parse(describe_config(cfg));
  ordered_json jin = ordered_json::object();
  for (const auto& p : inputs) jin[artifact_label(cfg, p)] = hash_file(p);
  m["inputs"] = jin;
  ordered_json jout = ordered_json::object();
  for (const auto& p : outputs) jout[artifact_label(cfg, p)] = hash_file(p);
  m["outputs"] = jout;
  m["counts"] = counts;
  std::ofstream out(manifest_path(cfg, stage));
  if (!out) throw error("cannot write manifest for stage " + stage);
  out << m.dump(2) << '\n';
}

std::string art(const RunConfig& cfg, const char* name) {
  return (fs::path(cfg.out_dir) / name).string();
}

void require_artifact(const std::string& path, const std::string& producer) {
  if (!fs::exists(path))
    throw dependency_error("missing artifact: " + path + " (run the " +
                           producer + " stage first)");
}

// ---- Shared stage plumbing.

struct LoadedPanel {
  panel::Panel pan;
  panel::NormalizedPanel np;
  std::vector<std::string> inputs;  // files consumed
};

LoadedPanel load_normalized(const RunConfig& cfg) {
  LoadedPanel lp;
  std::string panel_path =
      cfg.panel_csv.empty() ? art(cfg, "panel.csv") : cfg.panel_csv;
  std::string prices_path =
      cfg.prices_csv.empty() ? art(cfg, "prices.csv") : cfg.prices_csv;
  require_artifact(panel_path, "simulate");
  require_artifact(prices_path, "simulate");
  lp.inputs.push_back(panel_path);
  lp.inputs.push_back(prices_path);

  lp.pan = panel::load_panel(panel_path).panel;
  panel::PriceInputs pi;
  pi.price_index_csv = prices_path;
  pi.io_weights_csv = cfg.io_weights_csv;
  pi.wti_csv = cfg.wti_csv;
  if (!cfg.io_weights_csv.empty()) lp.inputs.push_back(cfg.io_weights_csv);
  if (!cfg.wti_csv.empty()) lp.inputs.push_back(cfg.wti_csv);
  panel::IndustryYearAggregates agg =
      panel::industry_aggregates(lp.pan, cfg.price_mode, pi);
  lp.np = panel::normalize(lp.pan, agg, cfg.scope);
  return lp;
}

Eigen::MatrixXd load_productivity(const RunConfig& cfg,
                                  const panel::NormalizedPanel& np,
                                  Eigen::VectorXd* y_hat = nullptr) {
  std::string path = art(cfg, "productivity.csv");
  require_artifact(path, "estimate");
  CsvTable t = read_csv(path);
  int c_plant = t.require_column("plant_id");
  int c_year = t.require_column("year");
  int c_h = t.require_column("omega_H");
  int c_s = t.require_column("omega_S");
  int c_u = t.require_column("omega_U");
  int c_y = t.require_column("y_hat");
  if (t.rows.size() != np.rows.size())
    throw schema_error("productivity file does not match the panel: " +
                       std::to_string(t.rows.size()) + " rows vs " +
                       std::to_string(np.rows.size()));
  Eigen::MatrixXd omega(np.rows.size(), 3);
  if (y_hat) y_hat->resize(static_cast<int>(np.rows.size()));
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& r = np.rows[i];
    if (t.rows[i][static_cast<std::size_t>(c_plant)] !=
            np.plant_names[static_cast<std::size_t>(r.plant)] ||
        static_cast<int>(t.number_at(i, c_year)) != r.year)
      throw schema_error("productivity file row " + std::to_string(i + 1) +
                         " does not line up with the panel");
    omega(static_cast<int>(i), 0) = t.number_at(i, c_h);
    omega(static_cast<int>(i), 1) = t.number_at(i, c_s);
    omega(static_cast<int>(i), 2) = t.number_at(i, c_u);
    if (y_hat) (*y_hat)(static_cast<int>(i)) = t.number_at(i, c_y);
  }
  return omega;
}

Eigen::VectorXd load_scores(const RunConfig& cfg,
                            const panel::NormalizedPanel& np) {
  std::string path = art(cfg, "ccp.csv");
  require_artifact(path, "ccp");
  CsvTable t = read_csv(path);
  int c_score = t.require_column("score");
  if (t.rows.size() != np.rows.size())
    throw schema_error("propensity file does not match the panel");
  Eigen::VectorXd s(np.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i)
    s(static_cast<int>(i)) = t.number_at(i, c_score);
  return s;
}

// ---- Stages.

bool stage_simulate(const RunConfig& cfg) {
  std::vector<std::string> inputs;  // none: the config drives everything
  if (cfg.skip_if_fresh && stage_is_fresh(cfg, "simulate", inputs)) return false;
  synth::SimConfig sc = cfg.sim;
  sc.seed = cfg.seed;
  synth::SimPanel sim = synth::simulate(sc);
  synth::WritePaths wp;
  wp.panel_csv = art(cfg, "panel.csv");
  wp.truth_csv = art(cfg, "truth.csv");
  wp.prices_csv = art(cfg, "prices.csv");
  synth::write_outputs(sim, wp);
  ordered_json counts = {{"plants", static_cast<int>(sim.panel.plant_names.size())},
                         {"rows", static_cast<int>(sim.panel.rows.size())},
                         {"max_foc_residual", sim.max_foc_residual},
                         {"max_cell_gap", sim.max_cell_gap}};
  write_manifest(cfg, "simulate", inputs,
                 {wp.panel_csv, wp.truth_csv, wp.prices_csv}, counts);
  return true;
}

ordered_json transform_json(const estimate::TransformSummary& t) {
  return {{"estimate", t.estimate}, {"sd", t.sd}, {"lo90", t.lo90},
          {"hi90", t.hi90}};
}

bool stage_estimate(const RunConfig& cfg) {
  LoadedPanel lp = load_normalized(cfg);
  if (cfg.skip_if_fresh && stage_is_fresh(cfg, "estimate", lp.inputs))
    return false;

  estimate::FirstStageFit fsf =
      cfg.first_stage_degree == 0
          ? estimate::first_stage_identity(lp.np)
          : estimate::first_stage(lp.np, cfg.first_stage_degree);
  estimate::ShareBasis basis = estimate::share_basis_from_panel(lp.np);
  estimate::EstimationOptions opt = cfg.est;
  opt.bootstrap_seed = cfg.seed + 1000003ull;
  estimate::GmmResult res = estimate::two_step_gmm(lp.np, fsf, basis, opt);

  ordered_json j;
  j["parameters"] = {{"tau", res.params.tau},
                     {"eta_M", res.params.eta_M},
                     {"theta", res.params.theta},
                     {"rho", res.params.rho}};
  j["transforms"] = {{"elasticity_outer", transform_json(res.elasticity_outer)},
                     {"elasticity_inner", transform_json(res.elasticity_inner)},
                     {"markdown", transform_json(res.markdown)},
                     {"tau", transform_json(res.tau)}};
  j["shares"] = {{"alpha_K", res.shares.alpha_K},
                 {"alpha_M", res.shares.alpha_M},
                 {"alpha_L", res.shares.alpha_L},
                 {"alpha_S", res.shares.alpha_S},
                 {"alpha_U", res.shares.alpha_U}};
  const char* rows_lbl[3] = {"H", "S", "U"};
  ordered_json markov;
  for (int eq = 0; eq < 3; ++eq) {
    ordered_json coef = ordered_json::array(), se = ordered_json::array();
    for (int c = 0; c < 5; ++c) {
      coef.push_back(res.markov.coef(eq, c));
      se.push_back(res.markov.se(eq, c));
    }
    markov[rows_lbl[eq]] = {{"coef", coef}, {"se", se}};
  }
  markov["columns"] = {"const", "omega_H_lag", "omega_S_lag", "omega_U_lag",
                       "export_lag"};
  markov["n"] = res.markov.n;
  j["markov"] = markov;
  j["objective"] = {{"step1", res.obj_step1}, {"step2", res.obj_step2}};
  ordered_json mom = ordered_json::array();
  for (int i = 0; i < 8; ++i) mom.push_back(res.moments(i));
  j["moments"] = mom;
  j["sample"] = {{"rows", res.n_rows},
                 {"pairs", res.n_pairs},
                 {"plants", res.n_plants}};
  j["retained"] = res.retained;
  j["bootstrap"] = {{"B", res.bootstrap_B},
                    {"retained", res.bootstrap_retained},
                    {"failed", res.bootstrap_failed},
                    {"seed", opt.bootstrap_seed}};
  j["first_stage"] = {{"identity", fsf.identity},
                      {"pooled", fsf.pooled},
                      {"columns", fsf.n_cols},
                      {"max_abs_residual", fsf.max_abs_residual}};
  std::string est_path = art(cfg, "estimate.json");
  {
    std::ofstream out(est_path);
    if (!out) throw error("cannot write " + est_path);
    out << j.dump(2) << '\n';
  }

  estimate::ProductivityPanel pp =
      estimate::recover_productivity(lp.np, fsf, res.params, res.shares);
  std::string prod_path = art(cfg, "productivity.csv");
  {
    CsvWriter w(prod_path);
    w.write_row({"plant_id", "year", "omega_H", "omega_S", "omega_U", "y_hat",
                 "export"});
    for (std::size_t i = 0; i < lp.np.rows.size(); ++i) {
      const auto& r = lp.np.rows[i];
      int ii = static_cast<int>(i);
      w.write_row({lp.np.plant_names[static_cast<std::size_t>(r.plant)],
                   std::to_string(r.year), format_number(pp.omega(ii, 0)),
                   format_number(pp.omega(ii, 1)), format_number(pp.omega(ii, 2)),
                   format_number(pp.y_hat(ii)), r.exporter ? "1" : "0"});
    }
  }
  ordered_json counts = {{"rows", res.n_rows},
                         {"pairs", res.n_pairs},
                         {"plants", res.n_plants},
                         {"bootstrap_retained", res.bootstrap_retained}};
  write_manifest(cfg, "estimate", lp.inputs, {est_path, prod_path}, counts);
  return true;
}

bool stage_ccp(const RunConfig& cfg) {
  LoadedPanel lp = load_normalized(cfg);
  std::vector<std::string> inputs = lp.inputs;
  inputs.push_back(art(cfg, "productivity.csv"));
  require_artifact(inputs.back(), "estimate");
  if (cfg.skip_if_fresh && stage_is_fresh(cfg, "ccp", inputs)) return false;

  Eigen::MatrixXd omega = load_productivity(cfg, lp.np);
  treatment::CcpFit fit = treatment::estimate_ccp(lp.np, omega);
  std::string path = art(cfg, "ccp.csv");
  {
    CsvWriter w(path);
    w.write_row({"plant_id", "year", "export", "export_next", "score"});
    for (std::size_t i = 0; i < lp.np.rows.size(); ++i) {
      const auto& r = lp.np.rows[i];
      w.write_row({lp.np.plant_names[static_cast<std::size_t>(r.plant)],
                   std::to_string(r.year), r.exporter ? "1" : "0",
                   std::to_string(r.e_next),
                   format_number(fit.score(static_cast<int>(i)))});
    }
  }
  ordered_json counts = {{"rows", static_cast<int>(lp.np.rows.size())},
                         {"fit_rows", static_cast<int>(fit.sample_rows.size())},
                         {"industry_dummies", fit.industry_dummies},
                         {"iterations", fit.logit.iterations}};
  write_manifest(cfg, "ccp", inputs, {path}, counts);
  return true;
}

bool stage_match(const RunConfig& cfg) {
  LoadedPanel lp = load_normalized(cfg);
  std::vector<std::string> inputs = lp.inputs;
  inputs.push_back(art(cfg, "productivity.csv"));
  require_artifact(inputs.back(), "estimate");
  inputs.push_back(art(cfg, "ccp.csv"));
  require_artifact(inputs.back(), "ccp");
  if (cfg.skip_if_fresh && stage_is_fresh(cfg, "match", inputs)) return false;

  Eigen::MatrixXd omega = load_productivity(cfg, lp.np);
  Eigen::VectorXd score = load_scores(cfg, lp.np);
  treatment::Cohorts co = treatment::classify(lp.np);
  treatment::MatchedSet ms = treatment::match(lp.np, co, score, cfg.match);
  treatment::BalanceTable bt = treatment::balance_table(lp.np, omega, ms);

  std::string matched_path = art(cfg, "matched.csv");
  {
    CsvWriter w(matched_path);
    w.write_row({"treated_plant", "entry_year", "treated_score", "rank",
                 "control_plant", "control_score", "weight"});
    for (const auto& cs : ms.cases) {
      double wgt = cs.control_plants.empty()
                       ? 0.0
                       : 1.0 / static_cast<double>(cs.control_plants.size());
      for (std::size_t r = 0; r < cs.control_plants.size(); ++r)
        w.write_row(
            {lp.np.plant_names[static_cast<std::size_t>(cs.plant)],
             std::to_string(cs.entry_year), format_number(cs.score),
             std::to_string(r + 1),
             lp.np.plant_names[static_cast<std::size_t>(cs.control_plants[r])],
             format_number(cs.control_scores[r]), format_number(wgt)});
    }
  }
  std::string balance_path = art(cfg, "balance.csv");
  {
    CsvWriter w(balance_path);
    w.write_row({"variable", "treated_mean", "control_mean", "difference",
                 "t_stat", "p_value"});
    for (const auto& r : bt.rows)
      w.write_row({r.name, format_number(r.treated_mean),
                   format_number(r.control_mean), format_number(r.diff),
                   format_number(r.t_stat), format_number(r.p_value)});
  }
  std::string hist_path = art(cfg, "score_hist.csv");
  {
    // Distribution of entry propensities: rank 0 is the treated plants, rank
    // r >= 1 the r-th nearest matched control.
    constexpr int kBins = 20;
    std::map<std::pair<int, int>, int> hist;
    auto bin_of = [&](double s) {
      int b = static_cast<int>(s * kBins);
      return std::min(std::max(b, 0), kBins - 1);
    };
    for (const auto& cs : ms.cases) {
      ++hist[{0, bin_of(cs.score)}];
      for (std::size_t r = 0; r < cs.control_scores.size(); ++r)
        ++hist[{static_cast<int>(r) + 1, bin_of(cs.control_scores[r])}];
    }
    CsvWriter w(hist_path);
    w.write_row({"rank", "bin_lo", "bin_hi", "count"});
    for (const auto& [key, count] : hist)
      w.write_row({std::to_string(key.first),
                   format_number(static_cast<double>(key.second) / kBins),
                   format_number(static_cast<double>(key.second + 1) / kBins),
                   std::to_string(count)});
  }
  ordered_json counts = {{"treated", static_cast<int>(ms.cases.size())},
                         {"candidates", ms.n_candidates},
                         {"unmatched", ms.n_unmatched},
                         {"never", co.n_never},
                         {"entrants", co.n_entrant},
                         {"set_aside", co.n_other}};
  write_manifest(cfg, "match", inputs, {matched_path, balance_path, hist_path},
                 counts);
  return true;
}

bool stage_did(const RunConfig& cfg) {
  LoadedPanel lp = load_normalized(cfg);
  std::vector<std::string> inputs = lp.inputs;
  inputs.push_back(art(cfg, "productivity.csv"));
  require_artifact(inputs.back(), "estimate");
  inputs.push_back(art(cfg, "ccp.csv"));
  require_artifact(inputs.back(), "ccp");
  inputs.push_back(art(cfg, "matched.csv"));
  require_artifact(inputs.back(), "match");
  if (cfg.skip_if_fresh && stage_is_fresh(cfg, "did", inputs)) return false;

  Eigen::MatrixXd omega = load_productivity(cfg, lp.np);
  Eigen::VectorXd score = load_scores(cfg, lp.np);
  treatment::Cohorts co = treatment::classify(lp.np);
  treatment::DidOptions dopt = cfg.did;
  dopt.seed = cfg.seed + 2000003ull;

  const char* comp[3] = {"did_omega_H.csv", "did_omega_S.csv",
                         "did_omega_U.csv"};
  std::vector<std::string> outputs;
  ordered_json counts;
  for (int c = 0; c < 3; ++c) {
    treatment::DidResult res = treatment::matched_did(
        lp.np, omega.col(c), co, score, cfg.match, dopt);
    std::string path = art(cfg, comp[c]);
    CsvWriter w(path);
    w.write_row({"horizon", "effect", "lo", "hi", "n_cases"});
    for (std::size_t h = 0; h < res.horizons.size(); ++h)
      w.write_row({std::to_string(res.horizons[h]),
                   format_number(res.effect(static_cast<int>(h))),
                   format_number(res.lo(static_cast<int>(h))),
                   format_number(res.hi(static_cast<int>(h))),
                   std::to_string(res.n_cases[h])});
    outputs.push_back(path);
    if (c == 2) {
      ordered_json nc = ordered_json::array();
      for (int v : res.n_cases) nc.push_back(v);
      counts["cases_by_horizon"] = nc;
    }
  }
  counts["ci_level"] = dopt.ci_level;
  counts["bootstrap_B"] = dopt.bootstrap_B;
  write_manifest(cfg, "did", inputs, outputs, counts);
  return true;
}

bool stage_event_study(const RunConfig& cfg) {
  LoadedPanel lp = load_normalized(cfg);
  if (cfg.skip_if_fresh && stage_is_fresh(cfg, "event-study", lp.inputs))
    return false;

  treatment::Cohorts co = treatment::classify(lp.np);
  const int n = static_cast<int>(lp.np.rows.size());
  Eigen::VectorXd skill_ratio(n), premium(n), machinery(n);
  bool mach_ok = lp.pan.has_machinery;
  for (int i = 0; i < n; ++i) {
    const auto& r = lp.np.rows[static_cast<std::size_t>(i)];
    skill_ratio(i) = std::log(r.s / r.u);
    premium(i) = std::log(r.w_s / r.w_u);
    machinery(i) = mach_ok ? std::log(r.machinery) : 0.0;
    if (mach_ok && !std::isfinite(machinery(i))) mach_ok = false;
  }

  struct Job {
    const char* file;
    const Eigen::VectorXd* y;
  };
  std::vector<Job> jobs = {{"event_skill_ratio.csv", &skill_ratio},
                           {"event_skill_premium.csv", &premium}};
  if (mach_ok) jobs.push_back({"event_machinery.csv", &machinery});

  std::vector<std::string> outputs;
  ordered_json counts;
  for (const Job& job : jobs) {
    treatment::EventStudyResult res =
        treatment::event_study(lp.np, *job.y, co, cfg.event);
    std::string path = art(cfg, job.file);
    CsvWriter w(path);
    w.write_row({"event_time", "coef", "se"});
    for (std::size_t k = 0; k < res.event_time.size(); ++k)
      w.write_row({std::to_string(res.event_time[k]),
                   format_number(res.coef(static_cast<int>(k))),
                   format_number(res.se(static_cast<int>(k)))});
    outputs.push_back(path);
    counts[job.file] = {{"obs", res.n_obs}, {"plants", res.n_plants}};
  }
  counts["machinery_available"] = mach_ok;
  write_manifest(cfg, "event-study", lp.inputs, outputs, counts);
  return true;
}

}  // namespace

bool run_stage(const std::string& stage, const RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  if (stage == "pipeline") {
    bool any = false;
    for (const auto& s : kStages) any = run_stage(s, cfg) || any;
    return any;
  }
  if (stage == "simulate") return stage_simulate(cfg);
  if (stage == "estimate") return stage_estimate(cfg);
  if (stage == "ccp") return stage_ccp(cfg);
  if (stage == "match") return stage_match(cfg);
  if (stage == "did") return stage_did(cfg);
  if (stage == "event-study") return stage_event_study(cfg);
  throw config_error("unknown stage: " + stage);
}

}  // namespace pipeline
}  // namespace facet
