#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"

namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = restune::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string config_path(const std::string& name) { return std::string(RESTUNE_CONFIG_DIR) + "/" + name; }

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("restune_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write(const std::string& name, const std::string& text) const {
    const fs::path p = dir_ / name;
    std::ofstream(p) << text;
    return p.string();
  }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

const char* kSmallTrain = R"([backbone]
dim = 8
depth = 2
heads = 2
classes = 4
seed = 2

[tuner]
kind = res_attn
op = mha
rank = 2
heads = 2

[train]
lr = 0.01
epochs = 3

[data]
size = 48
)";

const char* kSmallMatrix = R"([backbone]
dim = 8
depth = 1
heads = 2
classes = 4
seed = 2

[tuner]
kind = prefix
length = 2

[train]
lr = 0.01
epochs = 1

[data]
size = 16
)";

std::string slurp(const std::string& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  for (std::string l; std::getline(ss, l);) out.push_back(l);
  return out;
}

// metrics lines without the wall-clock field
std::vector<Json> metrics_records(const std::string& text) {
  std::vector<Json> out;
  for (const auto& l : lines_of(text)) {
    Json j = Json::parse(l);
    j.erase("elapsed_seconds");
    out.push_back(j);
  }
  return out;
}

}  // namespace

TEST_F(CliTest, TrainWritesMetricsAndCheckpoint) {
  const auto cfg = write("run.ini", kSmallTrain);
  const Result r = run({"train", "--config", cfg, "--out", path("out")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(path("out/model.rtck")));
  EXPECT_TRUE(fs::exists(path("out/eval.rtds")));
  const auto records = metrics_records(slurp(path("out/metrics.jsonl")));
  ASSERT_EQ(records.size(), 6u);
  EXPECT_EQ(records.back()["split"], "val");
  EXPECT_EQ(lines_of(r.out).size(), 6u);
}

TEST_F(CliTest, MalformedConfigExitsTwoNamingTheKey) {
  const auto cfg = write("bad.ini", std::string(kSmallTrain) + "lerning_rate = 0.1\n");
  const Result r = run({"train", "--config", cfg, "--out", path("out")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("lerning_rate"), std::string::npos) << r.err;
}

TEST_F(CliTest, SeedOverrideIsDeterministicAndChangesTheRun) {
  const auto cfg = write("run.ini", kSmallTrain);
  ASSERT_EQ(run({"train", "--config", cfg, "--seed", "5", "--out", path("a")}).code, 0);
  ASSERT_EQ(run({"train", "--config", cfg, "--seed", "5", "--out", path("b")}).code, 0);
  ASSERT_EQ(run({"train", "--config", cfg, "--seed", "6", "--out", path("c")}).code, 0);
  const auto a = metrics_records(slurp(path("a/metrics.jsonl")));
  EXPECT_EQ(a, metrics_records(slurp(path("b/metrics.jsonl"))));
  EXPECT_NE(a, metrics_records(slurp(path("c/metrics.jsonl"))));
  EXPECT_EQ(slurp(path("a/model.rtck")), slurp(path("b/model.rtck")));
}

TEST_F(CliTest, EvalMatchesLastMetricsEntry) {
  const auto cfg = write("run.ini", kSmallTrain);
  ASSERT_EQ(run({"train", "--config", cfg, "--out", path("out")}).code, 0);
  const auto records = metrics_records(slurp(path("out/metrics.jsonl")));
  const Result r = run({"eval", "--checkpoint", path("out/model.rtck"), "--data", path("out/eval.rtds"), "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const Json j = Json::parse(r.out);
  EXPECT_EQ(j["accuracy"], records.back()["accuracy"]);
  EXPECT_EQ(j["loss"], records.back()["loss"]);
  EXPECT_EQ(r.out, run({"eval", "--checkpoint", path("out/model.rtck"), "--data", path("out/eval.rtds"), "--json"}).out);
  const Result text = run({"eval", "--checkpoint", path("out/model.rtck"), "--data", path("out/eval.rtds")});
  EXPECT_NE(text.out.find("accuracy: "), std::string::npos);
}

TEST_F(CliTest, MissingFilesExitTwo) {
  EXPECT_EQ(run({"eval", "--checkpoint", path("none.rtck"), "--data", path("none.rtds")}).code, 2);
  EXPECT_EQ(run({"train", "--config", path("none.ini")}).code, 2);
  EXPECT_EQ(run({"count-params", "--config", path("none.ini")}).code, 2);
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"train"}).code, 2);
  EXPECT_EQ(run({"grad-check", "--config", config_path("grad_check.ini"), "--eps", "abc"}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(CliTest, CountParamsVitBaseEightByEight) {
  const Result r = run({"count-params", "--config", config_path("vit_b_res_attn_8x8.ini")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("2,359,296"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("reference: 2.35M, deviation 0.4%"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("(agrees)"), std::string::npos);
  const Json j = Json::parse(run({"count-params", "--config", config_path("vit_b_res_attn_8x8.ini"), "--json"}).out);
  EXPECT_EQ(j["total"], 2359296);
  EXPECT_EQ(j["analytic"], 2359296);
  EXPECT_TRUE(j["agree"].get<bool>());
}

TEST_F(CliTest, CountParamsFourByFourReportsDeviation) {
  const Json j = Json::parse(run({"count-params", "--config", config_path("vit_b_res_attn_4x4.ini"), "--json"}).out);
  EXPECT_EQ(j["total"], 589824);
  EXPECT_EQ(j["reference_millions"], 0.66);
  EXPECT_LT(j["deviation"].get<double>(), 0.0);
}

TEST_F(CliTest, CountParamsWithoutTunersIsZeroUnlessHeadIncluded) {
  const auto cfg = write("bare.ini", "[backbone]\ndim = 8\nclasses = 3\n");
  EXPECT_EQ(Json::parse(run({"count-params", "--config", cfg, "--json"}).out)["total"], 0);
  EXPECT_EQ(Json::parse(run({"count-params", "--config", cfg, "--json", "--include-head", "--include-bias"}).out)["total"],
            27);
}

TEST_F(CliTest, GradCheckPassesAndEchoesSettings) {
  const Result r = run({"grad-check", "--config", config_path("grad_check.ini"), "--eps", "2e-05", "--tol", "0.001"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("eps=2e-05"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("tol=0.001"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("result: PASS"), std::string::npos);
}

TEST_F(CliTest, GradCheckCorruptedBackwardExitsOne) {
  const Result r = run({"grad-check", "--config", config_path("grad_check.ini"), "--corrupt-backward", "--json"});
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(Json::parse(r.out)["passed"].get<bool>());
  // The fixture does not leak into later runs.
  EXPECT_EQ(run({"grad-check", "--config", config_path("grad_check.ini")}).code, 0);
}

TEST_F(CliTest, MatrixGridShapesDeterminismAndThreadIndependence) {
  const auto cfg = write("matrix.ini", kSmallMatrix);
  ::setenv("RES_TUNER_THREADS", "1", 1);
  const Result serial = run({"matrix", "--config", cfg, "--json"});
  ::setenv("RES_TUNER_THREADS", "3", 1);
  const Result parallel = run({"matrix", "--config", cfg, "--json"});
  const Result again = run({"matrix", "--config", cfg, "--json"});
  ::unsetenv("RES_TUNER_THREADS");
  ASSERT_EQ(serial.code, 0) << serial.err;
  const Json j = Json::parse(serial.out);
  EXPECT_EQ(j["single"]["rows"].size(), 4u);
  EXPECT_EQ(j["single"]["cols"].size(), 3u);
  EXPECT_EQ(j["dual"]["rows"].size(), 4u);
  EXPECT_EQ(j["dual"]["cols"].size(), 4u);
  EXPECT_EQ(j["single"]["train_accuracy"].size(), 4u);
  EXPECT_EQ(j["single"]["train_accuracy"][0].size(), 3u);
  EXPECT_EQ(j["dual"]["train_accuracy"][3].size(), 4u);
  EXPECT_EQ(j["cells"], 28);
  EXPECT_EQ(j["zero_init_identity"], 28);
  EXPECT_EQ(j["frozen_intact"], 28);
  EXPECT_EQ(serial.out, parallel.out);
  EXPECT_EQ(parallel.out, again.out);
}

TEST_F(CliTest, BadThreadBudgetIsAConfigError) {
  const auto cfg = write("matrix.ini", kSmallMatrix);
  ::setenv("RES_TUNER_THREADS", "zero", 1);
  const Result r = run({"matrix", "--config", cfg});
  ::unsetenv("RES_TUNER_THREADS");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("RES_TUNER_THREADS"), std::string::npos) << r.err;
}

TEST_F(CliTest, MakeDataWritesALoadableSplit) {
  const auto cfg = write("run.ini", kSmallTrain);
  const Result r = run({"make-data", "--config", cfg, "--split", "val", "--out", path("val.rtds")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(path("val.rtds")));
  EXPECT_EQ(run({"make-data", "--config", cfg, "--split", "holdout", "--out", path("x.rtds")}).code, 2);
}
