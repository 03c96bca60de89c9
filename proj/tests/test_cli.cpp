#include <gtest/gtest.h>

#include <sstream>

#include "lawa/cli.hpp"
#include "support.hpp"

using namespace lawa;
using testing_support::TempDir;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "lawa-kit");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliResult r;
  r.code = cli::dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path thousand_step_manifest(const TempDir& dir) {
  std::vector<Checkpoint> ckpts;
  for (std::int64_t s = 1000; s <= 141000; s += 1000) {
    ckpts.push_back(testing_support::make_checkpoint(s, {{"w", {static_cast<double>(s) / 1000.0}}}));
  }
  testing_support::write_trajectory(dir.path(), ckpts);
  return dir / "manifest.json";
}

}  // namespace

TEST(Cli, AvgWithThousandStepSchedule) {
  TempDir dir("cli");
  const auto manifest = thousand_step_manifest(dir);
  const auto r = run_cli({"avg", "--manifest", manifest.string(), "--k", "5", "--nu", "1000", "--interval", "3000",
                          "--start-step", "21000", "--out-dir", (dir / "d").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto derived = TrajectoryManifest::load(dir / "d" / "manifest.json");
  EXPECT_EQ(derived.size(), 41u);
  EXPECT_EQ(derived.first_step(), 21000);
  // members 17..21 -> 19
  EXPECT_EQ(read_checkpoint(derived.checkpoints.front().path).tensor("w").at(0), 19.0);
}

TEST(Cli, AvgDefaultsForThousandStepSpacing) {
  TempDir dir("cli");
  const auto manifest = thousand_step_manifest(dir);
  const auto r = run_cli({"--json", "avg", "--manifest", manifest.string(), "--out-dir", (dir / "d").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto doc = nlohmann::json::parse(r.out);
  EXPECT_EQ(doc.at("derived"), 41);
  EXPECT_EQ(doc.at("plan").at("plan"), nlohmann::json({{"k", 5}, {"nu", 1000}, {"interval", 3000}, {"start_step", 21000}}));
}

TEST(Cli, AvgInvalidKWritesNothing) {
  TempDir dir("cli");
  const auto manifest = thousand_step_manifest(dir);
  const auto r = run_cli({"avg", "--manifest", manifest.string(), "--k", "0", "--out-dir", (dir / "d").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(r.err.empty());
  EXPECT_FALSE(fs::exists(dir / "d"));
}

TEST(Cli, AvgIncompatibleNuWritesNothing) {
  TempDir dir("cli");
  const auto manifest = thousand_step_manifest(dir);
  const auto r = run_cli({"avg", "--manifest", manifest.string(), "--nu", "1500", "--out-dir", (dir / "d").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(fs::exists(dir / "d"));
}

TEST(Cli, UnknownSubcommandOrFlag) {
  auto r = run_cli({"frobnicate"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  r = run_cli({"avg", "--bogus"});
  EXPECT_EQ(r.code, 1);
  r = run_cli({});
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, MissingInputIsValidationError) {
  TempDir dir("cli");
  const auto r = run_cli({"avg", "--manifest", (dir / "nope.json").string(), "--out-dir", (dir / "d").string()});
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, CorruptCheckpointIsRuntimeError) {
  TempDir dir("cli");
  const auto manifest = thousand_step_manifest(dir);
  testing_support::spit(dir / "ckpt-5000.safetensors", "garbage!garbage!");
  const auto r = run_cli({"avg", "--manifest", manifest.string(), "--out-dir", (dir / "d").string()});
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, HelpListsAveragingDefaults) {
  const auto r = run_cli({"avg", "--help"});
  EXPECT_EQ(r.code, 0);
  for (const char* s : {"--k", "default: 5", "1000", "3000", "21000", "--nu", "--interval", "--start-step"}) {
    EXPECT_NE(r.out.find(s), std::string::npos) << s;
  }
  for (const char* sub : {"ema", "lmc", "train-toy", "train-classifier", "eval", "spikes", "report"}) {
    EXPECT_EQ(run_cli({sub, "--help"}).code, 0) << sub;
  }
  const auto top = run_cli({"--help"});
  for (const char* s : {"--seed", "--threads", "--verbose", "--json"}) EXPECT_NE(top.out.find(s), std::string::npos);
}

TEST(Cli, ToyWorkflowEndToEnd) {
  TempDir dir("cli");
  const auto run = (dir / "run").string();
  ASSERT_EQ(run_cli({"--seed", "3", "train-toy", "--out-dir", run}).code, 0);
  auto r = run_cli({"avg", "--manifest", run + "/manifest.json", "--out-dir", (dir / "lawa").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  r = run_cli({"eval", "--manifest", run + "/manifest.json", "--data", run + "/heldout.safetensors", "--out",
               (dir / "orig.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  r = run_cli({"eval", "--manifest", (dir / "lawa" / "manifest.json").string(), "--data", run + "/heldout.safetensors",
               "--out", (dir / "lawa.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  r = run_cli({"spikes", "--series", (dir / "orig.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(nlohmann::json::parse(r.out).contains("spikes"));
  r = run_cli({"report", "--original", (dir / "orig.csv").string(), "--derived", (dir / "lawa.csv").string(), "--out",
               (dir / "report.json").string(), "--csv", (dir / "savings.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto doc = nlohmann::json::parse(testing_support::slurp(dir / "report.json"));
  EXPECT_EQ(doc.at("schema"), "lawa-kit/report");
  EXPECT_EQ(testing_support::slurp(dir / "savings.csv").rfind("tolerance,target,steps_saved,gpu_hours_saved\n", 0), 0u);

  r = run_cli({"report", "--original", (dir / "orig.csv").string(), "--derived", (dir / "lawa.csv").string(),
               "--original-dataset", "a", "--derived-dataset", "b"});
  EXPECT_EQ(r.code, 1);

  r = run_cli({"ema", "--manifest", run + "/manifest.json", "--decay", "0", "--out-dir", (dir / "ema").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ema = TrajectoryManifest::load(dir / "ema" / "manifest.json");
  const auto orig = TrajectoryManifest::load(run + "/manifest.json");
  EXPECT_TRUE(read_checkpoint(ema.checkpoints[7].path).same_tensors(read_checkpoint(orig.checkpoints[7].path)));
}

TEST(Cli, LmcWritesSweepCsv) {
  TempDir dir("cli");
  const auto run = (dir / "run").string();
  ASSERT_EQ(run_cli({"train-toy", "--out-dir", run}).code, 0);
  const auto r = run_cli({"lmc", "--a", run + "/ckpt-step-100.safetensors", "--b", run + "/ckpt-step-2000.safetensors",
                          "--alphas", "0,0.2,0.4,0.6,0.8,1", "--model-family", "toy-linear", "--data",
                          run + "/heldout.safetensors"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(r.out);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "alpha,metric");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 6);

  const auto json = run_cli({"--json", "lmc", "--a", run + "/ckpt-step-100.safetensors", "--b",
                             run + "/ckpt-step-2000.safetensors", "--data", run + "/heldout.safetensors"});
  ASSERT_EQ(json.code, 0);
  const auto doc = nlohmann::json::parse(json.out);
  EXPECT_TRUE(doc.contains("barrier_height"));
  EXPECT_TRUE(doc.contains("connected"));

  EXPECT_EQ(run_cli({"lmc", "--a", run + "/ckpt-step-100.safetensors", "--b", run + "/ckpt-step-2000.safetensors",
                     "--alphas", "0,0.5", "--data", run + "/heldout.safetensors"})
                .code,
            1);
}

TEST(Cli, TrainToySweepAndValidation) {
  TempDir dir("cli");
  auto r = run_cli({"train-toy", "--out-dir", (dir / "sweep").string(), "--sweep", "--epochs", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* lr : {"lr-0.18", "lr-0.12", "lr-0.01"}) EXPECT_TRUE(fs::exists(dir / "sweep" / lr / "manifest.json"));
  EXPECT_EQ(run_cli({"train-toy", "--out-dir", (dir / "x").string(), "--optimizer", "rmsprop"}).code, 1);
  EXPECT_EQ(run_cli({"train-toy", "--out-dir", (dir / "x").string(), "--batch-size", "5000"}).code, 1);
}

TEST(Cli, TrainClassifierValidation) {
  TempDir dir("cli");
  EXPECT_EQ(run_cli({"train-classifier", "--out-dir", (dir / "c").string(), "--momentum", "1.5"}).code, 1);
  EXPECT_EQ(run_cli({"train-classifier", "--out-dir", (dir / "c").string(), "--schedule", "cosine"}).code, 1);
  EXPECT_FALSE(fs::exists(dir / "c"));
  const auto r = run_cli({"train-classifier", "--out-dir", (dir / "c").string(), "--epochs", "1", "--train-samples",
                          "256", "--ckpt-every", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(TrajectoryManifest::load(dir / "c" / "manifest.json").size(), 2u);
}

TEST(Cli, ThreadsFromEnvironment) {
  ::setenv("LAWA_KIT_THREADS", "3", 1);
  EXPECT_EQ(resolve_threads(std::nullopt), 3u);
  EXPECT_EQ(resolve_threads(2u), 2u);
  ::unsetenv("LAWA_KIT_THREADS");
  EXPECT_GE(resolve_threads(std::nullopt), 1u);
}
