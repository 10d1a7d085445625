#include <cstdint>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "facet/pipeline.hpp"

namespace {

int dispatch(const std::string& stage, const facet::pipeline::RunConfig& cfg) {
  bool ran = facet::pipeline::run_stage(stage, cfg);
  if (!ran && stage != "pipeline")
    std::cout << stage << ": artifacts are fresh, nothing to do\n";
  else
    std::cout << stage << ": done -> " << cfg.out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structural estimation pipeline for factor-biased "
               "learning-by-exporting on plant panels"};
  app.require_subcommand(0, 1);
  app.fallthrough();

  std::string config_path, out_dir, stage_flag, price_mode;
  std::uint64_t seed = 0;
  int k = 0, bootstrap_B = -1;
  bool skip_if_fresh = false;
  bool seed_set = false, out_set = false;

  app.add_option("--config", config_path, "Sectioned key=value run configuration")
      ->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "Base seed for every stochastic stage");
  auto* out_opt = app.add_option("--out", out_dir, "Artifact directory");
  app.add_option("--stage", stage_flag,
                 "Stage for the run subcommand (or use the stage subcommand)");
  app.add_option("--price-index-mode", price_mode,
                 "Materials price construction: wti, io, or fitted");
  app.add_option("--k", k, "Matched controls per export entrant");
  app.add_option("--bootstrap-B", bootstrap_B, "Bootstrap replicates");
  app.add_flag("--skip-if-fresh", skip_if_fresh,
               "Skip a stage whose manifest matches the current inputs");

  for (const auto& s : facet::pipeline::kStages) app.add_subcommand(s);
  app.add_subcommand("pipeline", "Run every stage in order");
  app.add_subcommand("run", "Run the stage named by --stage");

  CLI11_PARSE(app, argc, argv);
  seed_set = seed_opt->count() > 0;
  out_set = out_opt->count() > 0;

  try {
    facet::pipeline::RunConfig cfg = facet::pipeline::load_config(config_path);
    if (seed_set) cfg.seed = seed;
    if (out_set) cfg.out_dir = out_dir;
    if (!price_mode.empty()) {
      if (price_mode == "wti") cfg.price_mode = facet::panel::PriceMode::wti_proxy;
      else if (price_mode == "io") cfg.price_mode = facet::panel::PriceMode::io_weighted;
      else if (price_mode == "fitted") cfg.price_mode = facet::panel::PriceMode::fitted;
      else throw facet::config_error("price-index-mode must be wti, io, or fitted");
    }
    if (k > 0) cfg.match.k = k;
    if (bootstrap_B >= 0) {
      cfg.est.bootstrap_B = bootstrap_B;
      cfg.did.bootstrap_B = bootstrap_B;
    }
    if (skip_if_fresh) cfg.skip_if_fresh = true;

    std::string stage;
    for (const auto* sub : app.get_subcommands()) {
      stage = sub->get_name();
      break;
    }
    if (stage == "run") {
      if (stage_flag.empty())
        throw facet::config_error("run requires --stage <name>");
      stage = stage_flag;
    }
    if (stage.empty()) {
      std::cerr << "error: no stage given; use a subcommand or run --stage\n";
      return 2;
    }
    return dispatch(stage, cfg);
  } catch (const facet::dependency_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const facet::numerical_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const facet::config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const facet::schema_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const facet::parse_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const facet::domain_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const facet::error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
