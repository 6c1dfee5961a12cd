#include "mor/cli/app.hpp"

#include <CLI11.hpp>

#include <boost/rational.hpp>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "mor/cli/run_config.hpp"
#include "mor/errors.hpp"
#include "mor/flops/flops.hpp"
#include "mor/kv/cost_model.hpp"
#include "mor/model/checkpoint.hpp"
#include "mor/routing/routing.hpp"
#include "mor/sim/simulator.hpp"

namespace mor::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Runtime failure attributed to one pipeline stage.
struct ComponentError : std::runtime_error {
  ComponentError(std::string c, const std::string& what) : std::runtime_error(what), component(std::move(c)) {}
  std::string component;
};

template <typename F>
auto in_component(const char* component, F&& f) {
  try {
    return f();
  } catch (const ComponentError&) {
    throw;
  } catch (const std::exception& e) {
    throw ComponentError(component, e.what());
  }
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Collects artifact paths; everything listed must exist when the manifest is written.
class Run {
 public:
  Run(std::string subcommand, const RunConfig& cfg, fs::path out)
      : subcommand_(std::move(subcommand)), cfg_(cfg), out_(std::move(out)), started_(utc_now()) {
    fs::create_directories(out_);
  }

  fs::path path(const std::string& name) {
    artifacts_.push_back(name);
    return out_ / name;
  }
  void write_json(const std::string& name, const json& j) {
    std::ofstream(path(name)) << j.dump(2) << '\n';
  }
  void write_text(const std::string& name, const std::string& s) { std::ofstream(path(name)) << s; }

  void finish() {
    write_text("config.txt", cfg_.text());
    json arts = json::array();
    for (const auto& a : artifacts_) {
      if (!fs::exists(out_ / a)) throw ComponentError("cli", "artifact '" + a + "' was not written");
      arts.push_back(a);
    }
    const json manifest = {{"tool", "mor"},
                           {"version", kToolVersion},
                           {"subcommand", subcommand_},
                           {"seed", cfg_.train.seed},
                           {"config", cfg_.text()},
                           {"artifacts", arts},
                           {"started", started_},
                           {"finished", utc_now()}};
    std::ofstream(out_ / "manifest.json") << manifest.dump(2) << '\n';
  }

 private:
  std::string subcommand_;
  const RunConfig& cfg_;
  fs::path out_;
  std::string started_;
  std::vector<std::string> artifacts_;
};

train::Corpus load_corpus(const RunConfig& cfg) {
  return in_component("data", [&] {
    const std::string text = cfg.data.corpus.empty()
                                 ? train::synthetic_corpus(cfg.data.synthetic_bytes, cfg.data.synthetic_seed)
                                 : read_file(cfg.data.corpus);
    return train::Corpus(text, cfg.train.seq_len, cfg.data.eval_fraction);
  });
}

model::Model load_model(const RunConfig& cfg) {
  return in_component("model-core", [&] {
    if (!cfg.eval.checkpoint.empty()) return model::load_checkpoint(cfg.eval.checkpoint);
    return model::Model(cfg.model, cfg.router, cfg.train.seed);
  });
}

train::EvalOptions eval_options(const RunConfig& cfg) {
  train::EvalOptions o;
  o.policy = cfg.eval.policy;
  o.dead_mode = cfg.eval.dead_mode;
  return o;
}

void cmd_train(Run& run, const RunConfig& cfg, std::ostream& out) {
  const auto corpus = load_corpus(cfg);
  model::Model m = load_model(cfg);
  std::ofstream csv(run.path("metrics.csv"));
  train::write_csv_header(csv);
  const auto result = in_component("train-harness", [&] {
    return train::train(m, corpus, cfg.train, eval_options(cfg), [&](const train::LogRow& row) {
      train::write_csv_row(csv, row);
      csv.flush();
      out << "step " << row.step << " loss " << row.losses.total;
      if (row.eval_nll) out << " eval_nll " << *row.eval_nll;
      out << '\n';
    });
  });
  in_component("model-core", [&] { model::save_checkpoint(m, run.path("model.ckpt").string()); return 0; });
  run.write_json("final.json", {{"initial", result.initial.to_json()},
                                {"final", result.final.to_json()},
                                {"seconds", result.seconds},
                                {"train_windows", corpus.train_windows()},
                                {"eval_windows", corpus.eval_windows()}});
  out << "eval nll " << result.initial.nll << " -> " << result.final.nll << '\n';
}

void cmd_eval(Run& run, const RunConfig& cfg, std::ostream& out) {
  const auto corpus = load_corpus(cfg);
  const auto m = load_model(cfg);
  const auto report = in_component("train-harness", [&] {
    return train::evaluate(m, corpus.eval_batch(cfg.train.eval_windows), eval_options(cfg));
  });
  run.write_json("eval.json", report.to_json());
  out << report.to_json().dump(2) << '\n';
}

void cmd_kv_report(Run& run, const RunConfig& cfg, std::ostream& out) {
  const auto corpus = load_corpus(cfg);
  const auto m = load_model(cfg);
  const auto kv = in_component("train-harness", [&] {
    return train::kv_similarity_report(m, corpus.eval_batch(std::min<std::size_t>(cfg.train.eval_windows, 4)));
  });
  run.write_json("kv_report.json", kv.to_json());
  out << "within-block key cosine " << kv.within_block_cosine << ", across-block " << kv.across_block_cosine << '\n';
}

void cmd_annotate(Run& run, const RunConfig& cfg, std::ostream& out) {
  const auto m = load_model(cfg);
  const auto tokens = in_component("train-harness", [&] {
    return train::depth_annotation(m, cfg.annotate_text, cfg.eval.policy);
  });
  json arr = json::array();
  std::string text_line, depth_line;
  for (const auto& t : tokens) {
    arr.push_back({{"token", t.text}, {"depth", t.depth}});
    text_line += t.text;
    depth_line += std::string(t.text.size() - 1, ' ') + std::to_string(t.depth);
  }
  run.write_json("annotation.json", arr);
  out << text_line << '\n' << depth_line << '\n';
}

json flops_json(const flops::FlopsReport& r, const FlopsSettings& s) {
  json j = r.to_json();
  j["per_token_forward"] = r.per_token_forward();
  j["per_token_forward_without_lm_head"] = r.per_token_forward_without_lm_head();
  j["per_token_training"] = r.per_token_training();
  j["tokens_for_budget"] = r.tokens_for_budget(s.budget);
  j["budget_for_tokens"] = r.budget_for_tokens(s.tokens);
  return j;
}

void cmd_flops(Run& run, const RunConfig& cfg, std::ostream& out) {
  const auto [dense, routed] = in_component("flops-budget", [&] {
    const auto dense = flops::forward_flops_per_token(cfg.model, cfg.flops.seq_len);
    std::vector<double> caps;
    for (const auto& c : routing::capacity_schedule(cfg.model.recursions)) caps.push_back(boost::rational_cast<double>(c));
    const auto routed = flops::mor_flops_per_token(cfg.model, caps, cfg.model.kv_mode, cfg.router, cfg.flops.seq_len);
    return std::pair{dense, routed};
  });
  run.write_json("flops.json", {{"preset", cfg.preset},
                                {"budget", cfg.flops.budget},
                                {"tokens", cfg.flops.tokens},
                                {"unrouted", flops_json(dense, cfg.flops)},
                                {"routed", flops_json(routed, cfg.flops)}});
  auto row = [&](const char* name, double a, double b) {
    out << std::left << std::setw(26) << name << std::right << std::setw(16) << a << std::setw(16) << b << '\n';
  };
  out << std::setprecision(6);
  out << std::left << std::setw(26) << "per-token forward" << std::right << std::setw(16) << "unrouted" << std::setw(16)
      << "routed" << '\n';
  row("linear", dense.linear, routed.linear);
  row("attention", dense.attention, routed.attention);
  row("lm_head", dense.lm_head, routed.lm_head);
  row("router", dense.router, routed.router);
  row("total", dense.per_token_forward(), routed.per_token_forward());
  row("tokens for budget", dense.tokens_for_budget(cfg.flops.budget), routed.tokens_for_budget(cfg.flops.budget));
  row("budget for tokens", dense.budget_for_tokens(cfg.flops.tokens), routed.budget_for_tokens(cfg.flops.tokens));
}

json ratio_json(const kv::Ratio& r) {
  std::ostringstream os;
  os << r.numerator() << '/' << r.denominator();
  return {{"exact", os.str()}, {"value", boost::rational_cast<double>(r)}};
}

void cmd_cost_model(Run& run, const RunConfig& cfg, std::ostream& out) {
  const auto n_r = static_cast<std::int64_t>(cfg.model.recursions);
  const auto n_ctx = static_cast<std::int64_t>(cfg.cost.n_ctx);
  const auto k = cfg.cost.k == 0 ? n_ctx / n_r : static_cast<std::int64_t>(cfg.cost.k);
  json j = {{"recursions", n_r}, {"k", k}, {"n_ctx", n_ctx}, {"modes", json::object()}};
  for (auto mode : {kv::KvMode::RecursionWise, kv::KvMode::RecursiveSharing, kv::KvMode::Hybrid}) {
    const auto r = in_component("kv-cache", [&] { return kv::cost_model(n_r, k, n_ctx, mode); });
    const std::string name(kv::mode_name(mode));
    j["modes"][name] = {{"kv_memory", ratio_json(r.kv_memory)},
                        {"kv_io", ratio_json(r.kv_io)},
                        {"attn_flops", ratio_json(r.attn_flops)}};
    out << name << ": memory " << j["modes"][name]["kv_memory"]["exact"].get<std::string>() << ", io "
        << j["modes"][name]["kv_io"]["exact"].get<std::string>() << ", attention "
        << j["modes"][name]["attn_flops"]["exact"].get<std::string>() << '\n';
  }
  run.write_json("cost_model.json", j);
}

void cmd_simulate(Run& run, const RunConfig& cfg, std::ostream& out) {
  sim::SimConfig sc = cfg.sim.config;
  if (sc.n_r == 0) sc.n_r = cfg.model.recursions;
  sc.kv_mode = cfg.model.kv_mode;
  const auto lengths = in_component("decode-sim", [&] { return sim::sample_lengths(cfg.sim.workload); });
  std::optional<model::Model> m;
  sim::DepthOracle depth;
  if (cfg.sim.from_model) {
    m.emplace(load_model(cfg));
    sc.n_r = m->config().recursions;
    depth = in_component("decode-sim", [&] { return sim::model_depths(*m, cfg.eval.policy, lengths); });
  } else {
    depth = sim::proxy_depths(sc.n_r, cfg.sim.exit_fraction, cfg.sim.workload.seed);
  }
  const auto [dw, sw] = in_component("decode-sim", [&] {
    return std::pair{sim::simulate_depthwise(lengths, depth, sc), sim::simulate_sequencewise(lengths, depth, sc)};
  });
  if (sc.record_trace) {
    std::ofstream d(run.path("trace_depthwise.csv"));
    sim::write_trace_csv(d, dw.trace);
    std::ofstream s(run.path("trace_sequencewise.csv"));
    sim::write_trace_csv(s, sw.trace);
  }
  run.write_json("sim.json", {{"workload", cfg.sim.workload.to_json()},
                              {"recursions", sc.n_r},
                              {"slots", sc.slots},
                              {"exit_fraction", cfg.sim.from_model ? json(nullptr) : json(cfg.sim.exit_fraction)},
                              {"depthwise", dw.to_json()},
                              {"sequencewise", sw.to_json()},
                              {"speedup", dw.tokens_per_step / sw.tokens_per_step}});
  out << "tokens/step depth-wise " << dw.tokens_per_step << ", sequence-wise " << sw.tokens_per_step << '\n';
}

fs::path output_dir(const std::string& flag, const std::string& subcommand) {
  if (!flag.empty()) return flag;
  const char* root = std::getenv("MOR_OUT_ROOT");
  return fs::path(root && *root ? root : "runs") / subcommand;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Recursive-depth transformer toolkit: training, evaluation, cost accounting and decode simulation", "mor"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  std::string config_path, out_flag, preset;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--set", sets, "override, key=value (repeatable)")->allow_extra_args(false);
  app.add_option("--out", out_flag, "output directory (default $MOR_OUT_ROOT/<subcommand>, else runs/<subcommand>)");
  app.add_option("--seed", seed, "sets train.seed and sim.seed");
  app.add_option("--preset", preset, "named preset applied before other keys");

  const std::vector<std::pair<const char*, const char*>> subs = {
      {"train", "train a model; writes metrics.csv, final.json, model.ckpt"},
      {"eval", "evaluate a checkpoint on held-out windows"},
      {"flops", "per-token FLOPs decomposition and budget conversion"},
      {"simulate", "depth-wise vs sequence-wise batching simulation"},
      {"annotate", "per-token recursion depth of annotate.text"},
      {"cost-model", "KV memory, IO and attention ratios per cache mode"},
      {"kv-report", "key/value norm and cosine structure per unrolled layer"}};
  for (const auto& [name, help] : subs) app.add_subcommand(name, help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }
  const std::string sub = app.get_subcommands().front()->get_name();

  RunConfig cfg;
  try {
    if (!preset.empty()) sets.insert(sets.begin(), "preset=" + preset);
    if (seed) {
      sets.push_back("train.seed=" + std::to_string(*seed));
      sets.push_back("sim.seed=" + std::to_string(*seed));
    }
    cfg = parse_run_config(config_path.empty() ? std::string{} : read_file(config_path), sets);
    cfg.validate();
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  }

  try {
    Run run(sub, cfg, output_dir(out_flag, sub));
    if (sub == "train") cmd_train(run, cfg, out);
    else if (sub == "eval") cmd_eval(run, cfg, out);
    else if (sub == "flops") cmd_flops(run, cfg, out);
    else if (sub == "simulate") cmd_simulate(run, cfg, out);
    else if (sub == "annotate") cmd_annotate(run, cfg, out);
    else if (sub == "cost-model") cmd_cost_model(run, cfg, out);
    else cmd_kv_report(run, cfg, out);
    run.finish();
  } catch (const ComponentError& e) {
    err << e.component << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "cli: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace mor::cli
