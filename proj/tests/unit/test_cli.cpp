#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mor/cli/app.hpp"
#include "mor/cli/run_config.hpp"
#include "mor/errors.hpp"
#include "mor/flops/flops.hpp"
#include "mor/model/presets.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "mor");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = mor::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("mor_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string out(const std::string& name) const { return (dir_ / name).string(); }
  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, FlopsMatchesModule) {
  auto r = run_cli({"flops", "--preset", "mor-ec-360m-nr2", "--out", out("f")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(slurp(dir_ / "f" / "flops.json"));
  const auto& p = mor::model::find_preset("mor-ec-360m-nr2");
  const auto ref = mor::flops::mor_flops_per_token(p.model, {1.0, 0.5}, p.model.kv_mode, p.router, 2048);
  EXPECT_DOUBLE_EQ(j["routed"]["per_token_forward"].get<double>(), ref.per_token_forward());
  EXPECT_DOUBLE_EQ(j["routed"]["linear"].get<double>(), ref.linear);
  EXPECT_DOUBLE_EQ(j["routed"]["tokens_for_budget"].get<double>(), ref.tokens_for_budget(16.5e18));
  EXPECT_DOUBLE_EQ(j["unrouted"]["per_token_forward"].get<double>(),
                   mor::flops::forward_flops_per_token(p.model, 2048).per_token_forward());
  EXPECT_NE(r.out.find("attention"), std::string::npos);
}

TEST_F(CliTest, UnknownKeyExitsTwoNamingIt) {
  auto r = run_cli({"flops", "--set", "model.wingspan=3", "--out", out("x")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("model.wingspan"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir_ / "x"));

  auto bad_value = run_cli({"flops", "--set", "sim.slots=many"});
  EXPECT_EQ(bad_value.code, 2);
  EXPECT_NE(bad_value.err.find("sim.slots"), std::string::npos);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
  EXPECT_EQ(run_cli({"flops", "--set", "no-equals-sign"}).code, 2);
}

TEST_F(CliTest, RuntimeFailureExitsOneNamingComponent) {
  auto r = run_cli({"eval", "--set", "eval.checkpoint=" + out("missing.ckpt"), "--out", out("e")});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("model-core:", 0), 0u) << r.err;
  auto corpus = run_cli({"eval", "--set", "data.corpus=" + out("missing.txt"), "--out", out("c")});
  EXPECT_EQ(corpus.code, 1);
  EXPECT_EQ(corpus.err.rfind("data:", 0), 0u) << corpus.err;
}

TEST_F(CliTest, TrainTwiceGivesIdenticalMetrics) {
  const std::vector<std::string> common = {"train", "--seed", "5", "--set", "train.steps=12", "--set", "train.log_every=4",
                                           "--set", "data.synthetic_bytes=60000", "--set", "train.eval_windows=4"};
  auto a = common, b = common;
  a.insert(a.end(), {"--out", out("a")});
  b.insert(b.end(), {"--out", out("b")});
  ASSERT_EQ(run_cli(a).code, 0);
  ASSERT_EQ(run_cli(b).code, 0);
  const auto ma = slurp(dir_ / "a" / "metrics.csv");
  EXPECT_EQ(ma, slurp(dir_ / "b" / "metrics.csv"));
  EXPECT_GE(std::count(ma.begin(), ma.end(), '\n'), 4);

  // The snapshot alone reproduces the run.
  ASSERT_EQ(run_cli({"train", "--config", out("a") + "/config.txt", "--out", out("c")}).code, 0);
  EXPECT_EQ(ma, slurp(dir_ / "c" / "metrics.csv"));

  const auto manifest = json::parse(slurp(dir_ / "a" / "manifest.json"));
  EXPECT_EQ(manifest["seed"].get<std::uint64_t>(), 5u);
  for (const auto& art : manifest["artifacts"]) EXPECT_TRUE(fs::exists(dir_ / "a" / art.get<std::string>()));
  EXPECT_FALSE(manifest["started"].get<std::string>().empty());

  // The trained checkpoint evaluates to the final NLL recorded by training.
  auto e = run_cli({"eval", "--config", out("a") + "/config.txt", "--set", "eval.checkpoint=" + out("a") + "/model.ckpt",
                    "--out", out("e")});
  ASSERT_EQ(e.code, 0) << e.err;
  const auto fin = json::parse(slurp(dir_ / "a" / "final.json"));
  const auto ev = json::parse(slurp(dir_ / "e" / "eval.json"));
  EXPECT_DOUBLE_EQ(ev["nll"].get<double>(), fin["final"]["nll"].get<double>());
}

TEST_F(CliTest, SimulateAnnotateCostModelKvReport) {
  auto s = run_cli({"simulate", "--set", "sim.requests=50", "--set", "sim.trace=true", "--out", out("s")});
  ASSERT_EQ(s.code, 0) << s.err;
  const auto sim = json::parse(slurp(dir_ / "s" / "sim.json"));
  EXPECT_EQ(sim["recursions"].get<int>(), 3);
  EXPECT_GE(sim["speedup"].get<double>(), 1.0);
  EXPECT_TRUE(fs::exists(dir_ / "s" / "trace_depthwise.csv"));

  auto a = run_cli({"annotate", "--set", "annotate.text=ab", "--out", out("a")});
  ASSERT_EQ(a.code, 0) << a.err;
  const auto ann = json::parse(slurp(dir_ / "a" / "annotation.json"));
  ASSERT_EQ(ann.size(), 2u);
  for (const auto& t : ann) {
    EXPECT_GE(t["depth"].get<int>(), 1);
    EXPECT_LE(t["depth"].get<int>(), 3);
  }

  auto c = run_cli({"cost-model", "--set", "model.recursions=2", "--set", "model.layers=4", "--out", out("c")});
  ASSERT_EQ(c.code, 0) << c.err;
  const auto cm = json::parse(slurp(dir_ / "c" / "cost_model.json"));
  EXPECT_EQ(cm["modes"]["recursion-wise"]["kv_memory"]["exact"], "3/4");
  EXPECT_EQ(cm["modes"]["recursive-sharing"]["kv_io"]["exact"], "1/1");

  auto k = run_cli({"kv-report", "--set", "data.synthetic_bytes=30000", "--set", "train.eval_windows=2", "--out", out("k")});
  ASSERT_EQ(k.code, 0) << k.err;
  EXPECT_TRUE(json::parse(slurp(dir_ / "k" / "kv_report.json")).contains("key_cosine"));
}

TEST_F(CliTest, OutputRootFromEnvironment) {
  ::setenv("MOR_OUT_ROOT", dir_.c_str(), 1);
  const auto r = run_cli({"cost-model"});
  ::unsetenv("MOR_OUT_ROOT");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "cost-model" / "manifest.json"));
}

TEST(RunConfig, TextRoundTripsAndPresetAppliesFirst) {
  auto cfg = mor::cli::parse_run_config("router.alpha = 0.3\npreset = toy-mor-tc-nr2\n", {"sim.slots=7"});
  EXPECT_EQ(cfg.preset, "toy-mor-tc-nr2");
  EXPECT_DOUBLE_EQ(cfg.router.alpha, 0.3);
  EXPECT_EQ(cfg.sim.config.slots, 7u);
  const auto again = mor::cli::parse_run_config(cfg.text(), {});
  EXPECT_EQ(again.text(), cfg.text());
  EXPECT_THROW(mor::cli::parse_run_config("preset = nonesuch\n", {}), mor::ConfigError);
}
