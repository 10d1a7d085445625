#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "facet/estimate.hpp"
#include "facet/panel.hpp"
#include "facet/synth.hpp"
#include "facet/treatment.hpp"

namespace facet {
namespace pipeline {

// Effective run configuration: file values with command-line overrides already
// applied. Every field that changes an artifact takes part in the freshness
// fingerprint, so stale skip decisions cannot survive a config edit.
struct RunConfig {
  std::string out_dir = "out";
  std::uint64_t seed = 20260822;
  bool skip_if_fresh = false;

  synth::SimConfig sim;

  panel::PriceMode price_mode = panel::PriceMode::wti_proxy;
  panel::Scope scope = panel::Scope::global;
  std::string io_weights_csv;  // io_weighted mode
  std::string wti_csv;         // fitted mode
  std::string panel_csv;       // external panel overriding the simulated one
  std::string prices_csv;      // external price file

  estimate::EstimationOptions est;
  int first_stage_degree = 2;

  treatment::MatchOptions match;
  treatment::DidOptions did;
  treatment::EventStudyOptions event;
};

// Plain-text sectioned key=value configuration. Unknown keys are an error so
// typos cannot silently fall back to defaults.
RunConfig load_config(const std::string& path);

// Serialized effective configuration (deterministic key order); fingerprinted
// into every stage manifest.
std::string describe_config(const RunConfig& cfg);

extern const std::vector<std::string> kStages;  // execution order

// Runs one stage (or "pipeline" for all) against cfg.out_dir, writing the
// stage artifacts plus manifest_<stage>.json. Throws the library's error types
// on failure; returns true when work was done, false when a fresh manifest
// allowed a skip.
bool run_stage(const std::string& stage, const RunConfig& cfg);

}  // namespace pipeline
}  // namespace facet
