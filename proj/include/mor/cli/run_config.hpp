#pragma once

// Schema of a run: a preset name plus model.*, router.*, train.*, data.*,
// eval.*, sim.*, flops.*, cost.* and annotate.* keys. Keys apply in file
// order after the preset, then --set overrides in command-line order.

#include <cstdint>
#include <string>

#include "mor/model/config.hpp"
#include "mor/routing/router.hpp"
#include "mor/sim/simulator.hpp"
#include "mor/train/config_keys.hpp"
#include "mor/train/trainer.hpp"

namespace mor::cli {

struct DataSettings {
  std::string corpus;                        // text file; empty selects the synthetic corpus
  std::size_t synthetic_bytes = 1u << 20;
  std::uint64_t synthetic_seed = 0;
  double eval_fraction = 0.05;
};

struct EvalSettings {
  model::SelectionPolicy policy = model::SelectionPolicy::TopK;
  train::DeadTokenMode dead_mode = train::DeadTokenMode::PerPosition;
  std::string checkpoint;  // empty: a freshly initialised model from train.seed
};

struct SimSettings {
  sim::WorkloadSpec workload;
  sim::SimConfig config;         // n_r == 0 takes model.recursions; kv_mode follows model.kv_mode
  double exit_fraction = 0.5;
  bool from_model = false;       // depths from decoding the model instead of the proxy
};

struct FlopsSettings {
  std::size_t seq_len = 2048;
  double budget = 16.5e18;
  double tokens = 20e9;
};

struct CostSettings {
  std::size_t k = 0;        // selected tokens; 0 takes n_ctx / N_r
  std::size_t n_ctx = 2048;
};

struct RunConfig {
  std::string preset = "toy-mor-ec-nr3";
  model::ModelConfig model;
  routing::RouterConfig router;
  train::TrainConfig train;
  DataSettings data;
  EvalSettings eval;
  SimSettings sim;
  FlopsSettings flops;
  CostSettings cost;
  std::string annotate_text = "the quick brown fox jumps over the lazy dog.";

  RunConfig();  // the default preset applied

  // Throws ConfigError naming the key when it is unknown or malformed.
  void apply(const std::string& key, const std::string& value);
  void apply_preset(const std::string& name);
  void validate() const;

  // Canonical text; loading it with parse_run_config reproduces this config.
  std::string text() const;
};

// `text` is a config file body; `overrides` are key=value strings applied
// last. A `preset` key anywhere resets the config before other keys apply.
RunConfig parse_run_config(const std::string& text, const std::vector<std::string>& overrides);

}  // namespace mor::cli
