#include "mor/cli/run_config.hpp"

#include <sstream>

#include "mor/errors.hpp"
#include "mor/model/config_text.hpp"
#include "mor/model/presets.hpp"

namespace mor::cli {

using model::format_real;
using model::parse_count;
using model::parse_flag;
using model::parse_real;

namespace {

template <typename F>
auto named(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

}  // namespace

RunConfig::RunConfig() {
  apply_preset(preset);
  sim.config.n_r = 0;
}

void RunConfig::apply_preset(const std::string& name) {
  const auto& p = model::find_preset(name);
  preset = p.name;
  model = p.model;
  router = p.router;
}

void RunConfig::apply(const std::string& key, const std::string& value) {
  if (key == "preset") {
    named(key, [&] { apply_preset(value); return 0; });
    return;
  }
  if (model::apply_model_key(model, key, value) || model::apply_router_key(router, key, value) ||
      train::apply_train_key(train, key, value)) {
    return;
  }
  if (key == "data.corpus") data.corpus = value;
  else if (key == "data.synthetic_bytes") data.synthetic_bytes = parse_count(key, value);
  else if (key == "data.synthetic_seed") data.synthetic_seed = parse_count(key, value);
  else if (key == "data.eval_fraction") data.eval_fraction = parse_real(key, value);
  else if (key == "eval.policy") eval.policy = named(key, [&] { return model::parse_policy(value); });
  else if (key == "eval.dead_mode") eval.dead_mode = named(key, [&] { return train::parse_dead_mode(value); });
  else if (key == "eval.checkpoint") eval.checkpoint = value;
  else if (key == "sim.requests") sim.workload.requests = parse_count(key, value);
  else if (key == "sim.mean_length") sim.workload.mean_length = parse_real(key, value);
  else if (key == "sim.stddev_length") sim.workload.stddev_length = parse_real(key, value);
  else if (key == "sim.seed") sim.workload.seed = parse_count(key, value);
  else if (key == "sim.slots") sim.config.slots = parse_count(key, value);
  else if (key == "sim.recursions") sim.config.n_r = parse_count(key, value);
  else if (key == "sim.drain_threshold") sim.config.drain_threshold = parse_count(key, value);
  else if (key == "sim.max_active") sim.config.max_active = parse_count(key, value);
  else if (key == "sim.head_cost") sim.config.head_cost = parse_real(key, value);
  else if (key == "sim.trace") sim.config.record_trace = parse_flag(key, value);
  else if (key == "sim.exit_fraction") sim.exit_fraction = parse_real(key, value);
  else if (key == "sim.from_model") sim.from_model = parse_flag(key, value);
  else if (key == "flops.seq_len") flops.seq_len = parse_count(key, value);
  else if (key == "flops.budget") flops.budget = parse_real(key, value);
  else if (key == "flops.tokens") flops.tokens = parse_real(key, value);
  else if (key == "cost.k") cost.k = parse_count(key, value);
  else if (key == "cost.n_ctx") cost.n_ctx = parse_count(key, value);
  else if (key == "annotate.text") annotate_text = value;
  else throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::validate() const {
  model::validate(model);
  routing::validate(router);
  train.validate();
  if (!(data.eval_fraction > 0.0 && data.eval_fraction < 1.0)) throw ConfigError("data.eval_fraction must lie in (0, 1)");
  if (data.corpus.empty() && data.synthetic_bytes == 0) throw ConfigError("data.synthetic_bytes must be positive");
  if (train.seq_len > model.ctx_len) throw ConfigError("train.seq_len exceeds model.ctx_len");
  sim.workload.validate();
  if (!(sim.exit_fraction >= 0.0 && sim.exit_fraction <= 1.0)) throw ConfigError("sim.exit_fraction must lie in [0, 1]");
  if (flops.seq_len == 0) throw ConfigError("flops.seq_len must be positive");
  if (!(flops.budget > 0.0) || !(flops.tokens > 0.0)) throw ConfigError("flops.budget and flops.tokens must be positive");
  if (cost.n_ctx == 0 || cost.k > cost.n_ctx) throw ConfigError("cost.k must not exceed a positive cost.n_ctx");
}

std::string RunConfig::text() const {
  std::ostringstream os;
  os << "preset = " << preset << '\n'
     << model::model_config_text(model, router) << train::train_config_text(train)
     << "data.corpus = " << data.corpus << '\n'
     << "data.synthetic_bytes = " << data.synthetic_bytes << '\n'
     << "data.synthetic_seed = " << data.synthetic_seed << '\n'
     << "data.eval_fraction = " << format_real(data.eval_fraction) << '\n'
     << "eval.policy = " << model::policy_name(eval.policy) << '\n'
     << "eval.dead_mode = " << train::dead_mode_name(eval.dead_mode) << '\n'
     << "eval.checkpoint = " << eval.checkpoint << '\n'
     << "sim.requests = " << sim.workload.requests << '\n'
     << "sim.mean_length = " << format_real(sim.workload.mean_length) << '\n'
     << "sim.stddev_length = " << format_real(sim.workload.stddev_length) << '\n'
     << "sim.seed = " << sim.workload.seed << '\n'
     << "sim.slots = " << sim.config.slots << '\n'
     << "sim.recursions = " << sim.config.n_r << '\n'
     << "sim.drain_threshold = " << sim.config.drain_threshold << '\n'
     << "sim.max_active = " << sim.config.max_active << '\n'
     << "sim.head_cost = " << format_real(sim.config.head_cost) << '\n'
     << "sim.trace = " << (sim.config.record_trace ? "true" : "false") << '\n'
     << "sim.exit_fraction = " << format_real(sim.exit_fraction) << '\n'
     << "sim.from_model = " << (sim.from_model ? "true" : "false") << '\n'
     << "flops.seq_len = " << flops.seq_len << '\n'
     << "flops.budget = " << format_real(flops.budget) << '\n'
     << "flops.tokens = " << format_real(flops.tokens) << '\n'
     << "cost.k = " << cost.k << '\n'
     << "cost.n_ctx = " << cost.n_ctx << '\n'
     << "annotate.text = " << annotate_text << '\n';
  return os.str();
}

RunConfig parse_run_config(const std::string& text, const std::vector<std::string>& overrides) {
  model::KeyValues kvs = model::parse_key_values(text);
  for (const auto& o : overrides) kvs.push_back(model::parse_override(o));
  RunConfig cfg;
  for (const auto& [k, v] : kvs) {
    if (k == "preset") cfg.apply(k, v);
  }
  for (const auto& [k, v] : kvs) {
    if (k != "preset") cfg.apply(k, v);
  }
  return cfg;
}

}  // namespace mor::cli
