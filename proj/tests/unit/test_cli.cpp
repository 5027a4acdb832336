#include "cli.hpp"

#include "oslsel/rng.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace oslsel {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "oslsel");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("oslsel_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    RandomStream rng(3, 0);
    const double means[4][2] = {{0, 0}, {2.5, 0}, {0, 2.5}, {2.5, 2.5}};
    std::ofstream train(path("train.csv")), test(path("test.csv"));
    train << "x1,x2,y\n";
    test << "x1,x2,y\n";
    for (int i = 0; i < 300; ++i) {
      const int y = i % 3;
      train << means[y][0] + rng.normal() << ',' << means[y][1] + rng.normal() << ',' << 10 * y << '\n';
    }
    for (int j = 0; j < 300; ++j) {
      const int y = j % 4;
      test << means[y][0] + rng.normal() << ',' << means[y][1] + rng.normal() << ',' << (y == 3 ? 99 : 10 * y) << '\n';
    }
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

nlohmann::json error_of(const Result& r) {
  const auto j = nlohmann::json::parse(r.err);
  return j.at("error");
}

TEST_F(CliTest, FitWritesArtifacts) {
  const Result r = invoke({"fit", "--train", path("train.csv"), "--test", path("test.csv"), "--label", "y", "--basis",
                           "identity", "--starts", "2", "--out", path("fit")});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"theta.json", "weights.csv", "trace.csv", "diagnostics.json", "manifest.json"}) {
    EXPECT_TRUE(fs::exists(dir_ / "fit" / f)) << f;
  }
  std::ifstream in(path("fit/theta.json"));
  const auto theta = nlohmann::json::parse(in);
  EXPECT_EQ(theta.at("k_known"), 3);
  EXPECT_EQ(theta.at("gamma").size(), 3u);
  EXPECT_EQ(theta.at("label_map"), nlohmann::json({0, 10, 20}));
  std::ifstream mf(path("fit/manifest.json"));
  const auto manifest = nlohmann::json::parse(mf);
  EXPECT_EQ(manifest.at("inputs").size(), 2u);
  EXPECT_TRUE(manifest.at("excluded").contains("elapsed_seconds"));
  EXPECT_EQ(manifest.at("config_hash").get<std::string>().size(), 16u);
}

TEST_F(CliTest, FitThenClassify) {
  ASSERT_EQ(invoke({"fit", "--train", path("train.csv"), "--test", path("test.csv"), "--label", "y", "--out",
                    path("fit"), "--starts", "1"})
                .code,
            0);
  const Result r = invoke({"classify", "--model", path("fit/theta.json"), "--input", path("test.csv"), "--label", "y",
                           "--out", path("cls")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = nlohmann::json::parse(r.out);
  EXPECT_GT(report.at("accuracy").get<double>(), 0.6);
  EXPECT_EQ(report.at("confusion").size(), 4u);
  EXPECT_TRUE(fs::exists(dir_ / "cls" / "labels.csv"));
}

TEST_F(CliTest, IntervalContainsEstimate) {
  const Result r = invoke({"ci", "--train", path("train.csv"), "--test", path("test.csv"), "--label", "y", "--k", "3",
                           "--level", "0.95", "--starts", "1", "--curve-points", "5", "--out", path("ci")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  const auto& ci = j.at("intervals").at(0);
  EXPECT_LE(ci.at("lower").get<double>(), ci.at("estimate").get<double>());
  EXPECT_GE(ci.at("upper").get<double>(), ci.at("estimate").get<double>());
  EXPECT_TRUE(ci.contains("wald"));
  EXPECT_TRUE(fs::exists(dir_ / "ci" / "curves.csv"));
}

TEST_F(CliTest, Diagnose) {
  const Result r = invoke({"diagnose", "--train", path("train.csv"), "--test", path("test.csv"), "--label", "y",
                           "--starts", "1", "--out", path("diag")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_GT(j.at("assumptions").at("min_eigenvalue").get<double>(), 0.0);
  EXPECT_TRUE(j.at("trace_monotone").get<bool>());
}

TEST_F(CliTest, SimulateTable1Shape) {
  nlohmann::json s = {{"label", "tiny"},
                      {"k_known", 1},
                      {"means", {{0.0}, {2.0}}},
                      {"n", 100},
                      {"m", 100},
                      {"m_star", 50},
                      {"train_fractions", {1.0}},
                      {"pi", {0.6, 0.4}},
                      {"replications", 2},
                      {"seed", 5},
                      {"em", {{"n_starts", 1}}}};
  std::ofstream(path("s.json")) << nlohmann::json{{"scenarios", {s, s}}}.dump();
  const Result r = invoke({"simulate", "--scenario", path("s.json"), "--out", path("sim")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(path("sim/metrics.csv"));
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 3);
}

TEST_F(CliTest, HelpExitsZero) {
  const Result r = invoke({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("fit"), std::string::npos);
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  const Result none = invoke({});
  EXPECT_EQ(none.code, 2);
  EXPECT_EQ(error_of(none).at("code"), 2);

  const Result missing = invoke({"fit", "--train", path("nope.csv"), "--test", path("test.csv"), "--label", "y"});
  EXPECT_EQ(missing.code, 2);
  EXPECT_EQ(error_of(missing).at("type"), "usage");

  const Result level = invoke({"ci", "--train", path("train.csv"), "--test", path("test.csv"), "--label", "y",
                               "--level", "1.5"});
  EXPECT_EQ(level.code, 2);
}

TEST_F(CliTest, ValidationErrorsExitTwo) {
  const Result col = invoke({"fit", "--train", path("train.csv"), "--test", path("test.csv"), "--label", "nope",
                             "--out", path("o")});
  EXPECT_EQ(col.code, 2);
  EXPECT_EQ(error_of(col).at("type"), "validation");

  std::ofstream(path("bad.csv")) << "x1,x2,y\n1,abc,0\n";
  const Result parse = invoke({"fit", "--train", path("bad.csv"), "--test", path("test.csv"), "--label", "y",
                               "--out", path("o")});
  EXPECT_EQ(parse.code, 2);

  const Result k = invoke({"ci", "--train", path("train.csv"), "--test", path("test.csv"), "--label", "y", "--k",
                           "7", "--starts", "1", "--out", path("o")});
  EXPECT_EQ(k.code, 2);
}

TEST_F(CliTest, SolverFailureExitsThree) {
  std::ofstream train(path("sep.csv"));
  train << "x,y\n";
  for (int i = 0; i < 20; ++i) train << (i % 2 == 0 ? -1.0 - i : 1.0 + i) << ',' << i % 2 << '\n';
  train.close();
  std::ofstream test(path("sep_test.csv"));
  test << "x\n";
  for (int j = 0; j < 20; ++j) test << (j % 2 == 0 ? -1.5 - j : 1.5 + j) << '\n';
  test.close();
  const Result r = invoke({"fit", "--train", path("sep.csv"), "--test", path("sep_test.csv"), "--label", "y",
                           "--starts", "1", "--out", path("o")});
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_EQ(error_of(r).at("type"), "solver");
}

}  // namespace
}  // namespace oslsel
