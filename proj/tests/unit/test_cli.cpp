#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sys/wait.h>

#include <gtest/gtest.h>

#include "icecr/io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using icecr::load_table;
using icecr::read_text_file;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "icecr_test_cli";

int run(const std::string& args) {
  const std::string cmd = std::string(ICECR_CLI_PATH) + " " + args + " > " + (kRoot / "last.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_config(const std::string& name, const std::string& body) {
  fs::create_directories(kRoot);
  const auto p = kRoot / name;
  std::ofstream(p) << body;
  return p;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_text_file(e.path());
  return out;
}

const std::string kSmall = R"({"mesh": {"nx": 6, "ny": 3}, "training": {"shape": "2", "max_iterations": 3}})";

class Cli : public ::testing::Test {
protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    const auto cfg = write_config("small.json", kSmall);
    ASSERT_EQ(run("generate-truth --config " + cfg.string() + " --out " + (kRoot / "truth").string()), 0);
  }
  static fs::path truth() { return kRoot / "truth"; }
  static std::string config() { return (kRoot / "small.json").string(); }
};

}  // namespace

TEST_F(Cli, GenerateTruthIsBitwiseReproducible) {
  ASSERT_EQ(run("generate-truth --config " + config() + " --out " + (kRoot / "truth2").string()), 0);
  const auto a = snapshot(truth()), b = snapshot(kRoot / "truth2");
  EXPECT_EQ(a, b);
  for (const char* f : {"truth.json", "invariants.csv", "observations_0.csv", "observations_0.01.csv",
                        "observations_0.05.csv", "damage.csv", "velocity.csv"})
    EXPECT_TRUE(a.count(f)) << f;
}

TEST_F(Cli, TrainIsBitwiseReproducible) {
  const std::string base = "train --config " + config() + " --truth " + truth().string() + " --seed 3 --out ";
  ASSERT_EQ(run(base + (kRoot / "train_a").string()), 0);
  ASSERT_EQ(run(base + (kRoot / "train_b").string()), 0);
  const auto a = snapshot(kRoot / "train_a");
  EXPECT_EQ(a, snapshot(kRoot / "train_b"));
  for (const char* f : {"record.json", "rmse_map.csv", "delta_phi.csv", "topology.csv", "fields/damage.csv"})
    EXPECT_TRUE(a.count(f)) << f;
}

TEST_F(Cli, DamageFreeConfigDumpsZeroDamage) {
  const auto cfg = write_config("nodamage.json", R"({"mesh": {"nx": 6, "ny": 3},
    "physics": {"damage": {"gamma_f": 0, "gamma_h": 0}}})");
  ASSERT_EQ(run("generate-truth --config " + cfg.string() + " --out " + (kRoot / "nodamage").string()), 0);
  for (double v : load_table(kRoot / "nodamage" / "damage.csv").values("phi")) EXPECT_LT(std::abs(v), 1e-15);
  // zero network reproduces it; the optimizer stops at once
  ASSERT_EQ(run("train --config " + cfg.string() + " --truth " + (kRoot / "nodamage").string() +
                " --init zero --out " + (kRoot / "nodamage_run").string()),
            0);
  const auto rec = nlohmann::json::parse(read_text_file(kRoot / "nodamage_run" / "record.json"));
  EXPECT_EQ(rec.at("termination"), "gradient_tol");
  EXPECT_LT(rec.at("final_exp_loss").get<double>(), 1e-20);
}

TEST_F(Cli, EvaluateIsReadOnlyAndScoresTruthAsZero) {
  ASSERT_EQ(run("train --config " + config() + " --truth " + truth().string() + " --out " + (kRoot / "ev").string()), 0);
  const auto before_truth = snapshot(truth()), before_run = snapshot(kRoot / "ev");
  ASSERT_EQ(run("evaluate --truth " + truth().string() + " --record " + (kRoot / "ev" / "record.json").string()), 0);
  const auto report = nlohmann::json::parse(read_text_file(kRoot / "last.log"));
  EXPECT_TRUE(report.at("equivariance_pass").get<bool>());
  EXPECT_TRUE(report.contains("rmse_small") && report.contains("rmse_large") && report.contains("delta_phi_rms"));
  EXPECT_EQ(before_truth, snapshot(truth()));
  EXPECT_EQ(before_run, snapshot(kRoot / "ev"));
  ASSERT_EQ(run("evaluate --truth " + truth().string() + " --ground-truth"), 0);
  EXPECT_EQ(nlohmann::json::parse(read_text_file(kRoot / "last.log")).at("invariant_loss").get<double>(), 0.0);
}

TEST_F(Cli, MinimalSweepAndPlots) {
  const auto cfg = write_config("sweep.json", R"({"mesh": {"nx": 6, "ny": 3}, "training": {"max_iterations": 2},
    "sweep": {"shapes": ["2"], "activations": ["tanh"], "optimizers": ["bfgs"], "observers": ["surface"],
              "noises": [0.01], "seeds": [1]}})");
  const auto out = kRoot / "sweep";
  ASSERT_EQ(run("sweep --config " + cfg.string() + " --truth " + truth().string() + " --out " + out.string()), 0);
  const auto agg = read_text_file(out / "aggregate.csv");
  EXPECT_EQ(std::count(agg.begin(), agg.end(), '\n'), 2);
  const auto corr = read_text_file(out / "correlation.csv");
  EXPECT_EQ(std::count(corr.begin(), corr.end(), '\n'), 2);
  ASSERT_EQ(run("plot --in " + out.string()), 0);
  EXPECT_TRUE(fs::exists(out / "correlation.svg"));
  ASSERT_EQ(run("train --config " + config() + " --truth " + truth().string() + " --out " + (kRoot / "pl").string()), 0);
  ASSERT_EQ(run("plot --in " + (kRoot / "pl").string()), 0);
  EXPECT_TRUE(fs::exists(kRoot / "pl" / "rmse_map.svg"));
  EXPECT_TRUE(fs::exists(kRoot / "pl" / "delta_phi.svg"));
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("train --out x --shape 4xq"), 2);
  EXPECT_EQ(run("train --truth " + (kRoot / "nope").string() + " --out " + (kRoot / "x").string()), 4);
  EXPECT_EQ(run("generate-truth --config " + (kRoot / "missing.json").string() + " --out x"), 4);
  const auto bad = write_config("bad.json", "{\"mesh\": {\"nx\": 6,, }}");
  EXPECT_EQ(run("generate-truth --config " + bad.string() + " --out x"), 4);
  const auto stalled = write_config("stalled.json", R"({"mesh": {"nx": 6, "ny": 3}, "numerics": {"newton_max_iterations": 1}})");
  EXPECT_EQ(run("generate-truth --config " + stalled.string() + " --out " + (kRoot / "stalled").string()), 3);
  std::ofstream(kRoot / "garbage.json") << "[1, 2";
  EXPECT_EQ(run("evaluate --truth " + truth().string() + " --record " + (kRoot / "garbage.json").string()), 4);
  EXPECT_EQ(run("plot --in " + (kRoot / "stalled").string()), 4);
}
