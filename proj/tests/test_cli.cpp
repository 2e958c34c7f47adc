#include <agnocomm/cli.hpp>
#include <agnocomm/csv.hpp>
#include <agnocomm/ood.hpp>
#include <agnocomm/stats.hpp>

#include <gtest/gtest.h>
#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace agnocomm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("agnocomm_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

json small_config() {
  return json::parse(R"({
    "seeds": [0, 1],
    "env": {"n_lidar_rays": 4, "episode_length": 25},
    "autoencoder": {"latent_dim": 16, "key_dim": 8, "hidden_dim": 16, "max_cardinality": 5},
    "collect": {"samples": 120, "agent_counts": [1, 2, 3]},
    "pretrain": {"iterations": 40, "batch_size": 16},
    "train": {"iterations": 3, "train_batch": 100, "rollout_fragment": 25, "minibatch": 64,
              "sgd_epochs": 2, "hidden": [16], "latent_dim": 16},
    "eval": {"episodes": 2},
    "ood": {"window": 2, "iterations": 3}
  })");
}

fs::path write_config(const fs::path& dir, const json& j, const std::string& name = "config.json") {
  const auto p = dir / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

struct Outcome {
  int code;
  std::string err;
  std::string out;
};

Outcome run(std::vector<std::string> args, const cli::Environment& env = {}) {
  args.insert(args.begin(), "agnocomm");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  testing::internal::CaptureStderr();
  testing::internal::CaptureStdout();
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), env);
  auto out = testing::internal::GetCapturedStdout();
  return {code, testing::internal::GetCapturedStderr(), std::move(out)};
}

Outcome stage(const std::string& cmd, const fs::path& config, const fs::path& out, const cli::Environment& env = {}) {
  return run({cmd, "--config", config.string(), "--out", out.string()}, env);
}

int shell(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(RunConfig, MissingRequiredKeyNamesIt) {
  const auto dir = scratch("missing");
  auto j = small_config();
  j["collect"].erase("samples");
  const auto r = stage("collect", write_config(dir, j), dir / "run");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("collect.samples"), std::string::npos) << r.err;
}

TEST(RunConfig, UnknownKeysRejected) {
  const auto dir = scratch("unknown");
  auto j = small_config();
  j["train"]["learning_rate"] = 0.1;
  const auto r = stage("collect", write_config(dir, j), dir / "run");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("train.learning_rate"), std::string::npos) << r.err;

  EXPECT_THROW(cli::load_config(write_config(dir, small_config()), {{"AGNOCOMM_TRAIN_LEARNING_RATE", "1"}}),
               ConfigError);
}

TEST(RunConfig, TypeErrorsNameTheKey) {
  const auto dir = scratch("types");
  auto j = small_config();
  j["env"]["n_agents"] = -2;
  try {
    cli::load_config(write_config(dir, j), {});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("env.n_agents"), std::string::npos);
  }
}

TEST(RunConfig, EnvironmentOverrides) {
  const auto dir = scratch("override");
  const auto path = write_config(dir, small_config());
  const auto c = cli::load_config(path, {{"AGNOCOMM_ENV_N_AGENTS", "5"},
                                         {"AGNOCOMM_ARM", "task_agnostic"},
                                         {"AGNOCOMM_COMM_EPSILON", "0.5"},
                                         {"AGNOCOMM_SEEDS", "[7, 8]"},
                                         {"AGNOCOMM_OUT", "/tmp/somewhere"}});
  EXPECT_EQ(c.env.n_agents, 5u);
  EXPECT_EQ(c.arm, ippo::ArmId::task_agnostic);
  EXPECT_EQ(c.comm.epsilon, 0.5);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{7, 8}));
  EXPECT_EQ(c.out, fs::path("/tmp/somewhere"));
  EXPECT_EQ(c.autoencoder.element_dim, c.env.observation_dim());

  const auto base = cli::load_config(path, {});
  EXPECT_TRUE(std::isinf(base.comm.epsilon));
  EXPECT_NE(cli::config_hash(base), cli::config_hash(c));
  EXPECT_EQ(cli::config_hash(base), cli::config_hash(cli::load_config(path, {})));
}

TEST(RunConfig, FlatDottedKeysAccepted) {
  const auto dir = scratch("flat");
  const auto nested = cli::load_config(write_config(dir, small_config(), "a.json"), {});
  json flat;
  const auto nested_json = small_config();
  for (const auto& [k, v] : nested_json.items()) {
    if (v.is_object())
      for (const auto& [k2, v2] : v.items()) flat[k + "." + k2] = v2;
    else
      flat[k] = v;
  }
  EXPECT_EQ(cli::canonical_config(nested), cli::canonical_config(cli::load_config(write_config(dir, flat, "b.json"), {})));
}

TEST(Collect, ByteIdenticalAndListedInManifest) {
  const auto dir = scratch("collect");
  const auto cfg = write_config(dir, small_config());
  ASSERT_EQ(stage("collect", cfg, dir / "a").code, 0);
  ASSERT_EQ(stage("collect", cfg, dir / "b").code, 0);
  EXPECT_EQ(slurp(dir / "a" / "dataset.agno"), slurp(dir / "b" / "dataset.agno"));
  const auto m = json::parse(slurp(dir / "a" / "manifest_collect.json"));
  const auto artifacts = m.at("artifacts").get<std::vector<std::string>>();
  EXPECT_NE(std::find(artifacts.begin(), artifacts.end(), "dataset.agno"), artifacts.end());
  EXPECT_EQ(m.at("config_hash").get<std::string>().size(), 16u);
  EXPECT_EQ(m.at("stage"), "collect");
}

TEST(RunDirectory, RerunNoOpsAndRefusesOverwrite) {
  const auto dir = scratch("rerun");
  const auto cfg = write_config(dir, small_config());
  ASSERT_EQ(stage("collect", cfg, dir / "run").code, 0);
  const auto before = fs::last_write_time(dir / "run" / "dataset.agno");
  const auto again = stage("collect", cfg, dir / "run");
  EXPECT_EQ(again.code, 0);
  EXPECT_NE(again.err.find("already complete"), std::string::npos);
  EXPECT_EQ(fs::last_write_time(dir / "run" / "dataset.agno"), before);

  const auto changed = stage("collect", cfg, dir / "run", {{"AGNOCOMM_COLLECT_SAMPLES", "60"}});
  EXPECT_EQ(changed.code, 1);
  EXPECT_NE(changed.err.find("refusing to overwrite"), std::string::npos) << changed.err;
}

TEST(Pretrain, TraceHeaderAndCalibration) {
  const auto dir = scratch("pretrain");
  const auto cfg = write_config(dir, small_config());
  ASSERT_EQ(stage("collect", cfg, dir / "run").code, 0);
  const auto r = stage("pretrain", cfg, dir / "run");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto trace = slurp(dir / "run" / "loss_trace.csv");
  EXPECT_EQ(trace.rfind("iteration,total_loss,element_loss,card_loss", 0), 0u);

  const auto history = pisa::read_loss_trace(dir / "run" / "loss_trace.csv");
  const auto c = ood::load_calibration(dir / "run" / "calibration.json");
  // tail of 40 iterations at fraction 0.1: the last 4, pooled per-set spread
  double m = 0.0, s2 = 0.0;
  for (std::size_t i = 36; i < 40; ++i) {
    m += history[i].total / 4.0;
    s2 += (history[i].total_std * history[i].total_std + history[i].total * history[i].total) / 4.0;
  }
  const double sd = std::sqrt(std::max(0.0, s2 - m * m));
  EXPECT_NEAR(c.threshold, m + 3.0 * sd, 1e-12 * (1.0 + std::abs(c.threshold)));
  EXPECT_EQ(c.window, 4u);

  const auto manifest = json::parse(slurp(dir / "run" / "manifest_pretrain.json"));
  for (const auto& a : manifest.at("artifacts")) EXPECT_TRUE(fs::exists(dir / "run" / a.get<std::string>()));
}

TEST(Train, NoCommsNeedsNoCheckpointAndAggregateRecomputes) {
  const auto dir = scratch("train");
  auto j = small_config();
  j["arm"] = "no_comms";
  j["task"] = "discovery";
  const auto cfg = write_config(dir, j);
  const auto r = stage("train", cfg, dir / "run");
  ASSERT_EQ(r.code, 0) << r.err;

  std::vector<CsvTable> seeds;
  for (int s : {0, 1}) {
    seeds.push_back(read_csv(dir / "run" / "metrics" / ("seed_" + std::to_string(s) + ".csv")));
    EXPECT_EQ(seeds.back().header, cli::metrics_header());
    EXPECT_EQ(seeds.back().rows.size(), 3u);
    EXPECT_TRUE(fs::exists(dir / "run" / "checkpoints" / ("policy_seed" + std::to_string(s) + ".agno")));
  }
  const auto agg = read_csv(dir / "run" / "metrics" / "aggregate.csv");
  EXPECT_EQ(agg.header, cli::aggregate_header());
  for (std::size_t i = 0; i < 3; ++i) {
    const double a = seeds[0].number(i, "mean_return"), b = seeds[1].number(i, "mean_return");
    EXPECT_NEAR(agg.number(i, "mean_return_mean"), (a + b) / 2.0, 1e-12);
    EXPECT_NEAR(agg.number(i, "mean_return_p2.5"), std::min(a, b) + 0.025 * std::abs(a - b), 1e-12);
    EXPECT_NEAR(agg.number(i, "mean_return_p97.5"), std::min(a, b) + 0.975 * std::abs(a - b), 1e-12);
  }

  const auto e = stage("eval", cfg, dir / "run");
  ASSERT_EQ(e.code, 0) << e.err;
  const auto summary = json::parse(slurp(dir / "run" / "eval" / "summary.json"));
  EXPECT_EQ(summary.at("per_seed_mean_return").size(), 2u);
  EXPECT_TRUE(summary.contains("p2.5") && summary.contains("p97.5"));

  // eval reproduces from the same checkpoints
  fs::remove(dir / "run" / "manifest_eval.json");
  const auto first = slurp(dir / "run" / "eval" / "summary.json");
  ASSERT_EQ(stage("eval", cfg, dir / "run").code, 0);
  EXPECT_EQ(slurp(dir / "run" / "eval" / "summary.json"), first);
}

TEST(Train, CommunicatingArmNeedsEncoder) {
  const auto dir = scratch("needs_encoder");
  auto j = small_config();
  j["arm"] = "task_agnostic";
  j["task"] = "discovery";
  const auto r = stage("train", write_config(dir, j), dir / "run");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("encoder.agno"), std::string::npos) << r.err;
}

TEST(Eval, MissingCheckpointFails) {
  const auto dir = scratch("eval_missing");
  auto j = small_config();
  j["arm"] = "no_comms";
  j["task"] = "discovery";
  const auto r = stage("eval", write_config(dir, j), dir / "run");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("policy_seed0.agno"), std::string::npos) << r.err;
}

TEST(Ood, VerdictLinesAndExitCodes) {
  const auto dir = scratch("ood");
  auto j = small_config();
  j["arm"] = "task_agnostic";
  j["task"] = "discovery";
  j["seeds"] = {0};
  j["encoder_dir"] = (dir / "pre").string();
  j["ood"]["mode"] = "live";
  const auto cfg = write_config(dir, j);
  ASSERT_EQ(stage("collect", cfg, dir / "pre").code, 0);
  ASSERT_EQ(stage("pretrain", cfg, dir / "pre").code, 0);

  // A calibration no loss can reach, then one every loss exceeds.
  auto cal = ood::load_calibration(dir / "pre" / "calibration.json");
  ood::save_calibration(ood::calibrate(1e9, 0.0, cal.window), dir / "high.json");
  ood::save_calibration(ood::calibrate(0.0, 0.0, cal.window), dir / "low.json");

  const auto in = stage("ood", cfg, dir / "in", {{"AGNOCOMM_OOD_CALIBRATION", (dir / "high.json").string()}});
  EXPECT_EQ(in.code, 0) << in.err;
  std::istringstream lines(in.out);
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "iteration,loss,threshold,flag");
  int count = 0;
  while (std::getline(lines, line)) {
    ++count;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 3);
    EXPECT_NE(line.find(",in_distribution"), std::string::npos);
  }
  EXPECT_EQ(count, 2);  // iterations 1 and 2 close a window of 2

  const auto out = stage("ood", cfg, dir / "out", {{"AGNOCOMM_OOD_CALIBRATION", (dir / "low.json").string()}});
  EXPECT_EQ(out.code, 2) << out.err;
  EXPECT_NE(out.out.find("out_of_distribution"), std::string::npos);
  // a rerun replays the verdict and its exit code
  EXPECT_EQ(stage("ood", cfg, dir / "out", {{"AGNOCOMM_OOD_CALIBRATION", (dir / "low.json").string()}}).code, 2);

  auto nc = j;
  nc["arm"] = "no_comms";
  EXPECT_EQ(stage("ood", write_config(dir, nc, "nc.json"), dir / "nc").code, 1);
}

TEST(Binary, ExitCodesThroughProcessEnvironment) {
  const auto dir = scratch("binary");
  auto j = small_config();
  j["collect"].erase("samples");
  const auto cfg = write_config(dir, j);
  const std::string bin = AGNOCOMM_BINARY;
  const std::string base = bin + " collect --config " + cfg.string() + " --out " + (dir / "run").string();
  EXPECT_EQ(shell(base + " 2>/dev/null"), 1);
  EXPECT_EQ(shell("AGNOCOMM_COLLECT_SAMPLES=30 " + base + " 2>/dev/null"), 0);
  EXPECT_TRUE(fs::exists(dir / "run" / "dataset.agno"));
  EXPECT_EQ(shell(bin + " bogus 2>/dev/null"), 1);
  EXPECT_EQ(shell(bin + " collect 2>/dev/null"), 1);
}
