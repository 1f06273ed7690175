// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "ksm/commands.hpp"
#include "support.hpp"

namespace ksm {
namespace {

RunOptions quick_run(const std::filesystem::path& out, std::uint64_t seed, const char* strategy = "ksm") {
  RunOptions o;
  o.data.tasks = 3;
  o.data.train_per_class = 30;
  o.data.test_per_class = 15;
  o.data.seed = seed;
  o.strategy = strategy;
  o.epochs = 1;
  o.batch = 16;
  o.lr = 1e-2;
  o.out = out.string();
  return o;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(KSM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string strip_seconds(const std::string& csv) {
  std::istringstream in(csv);
  std::string out, line;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

TEST(CmdRun, WritesLedgersAndArtifacts) {
  testing::TempDir dir;
  std::ostringstream out, err;
  ASSERT_EQ(cmd_run(quick_run(dir.path(), 1), out, err), kExitOk) << err.str();
  for (const char* f : {"ledger.csv", "ledger.json", "run.json", "backbone.ksmc", "task_1.ksm", "task_2.ksm", "task_3.ksm"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  const auto csv = testing::read_text(dir / "ledger.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  const auto json = nlohmann::json::parse(testing::read_text(dir / "ledger.json"));
  EXPECT_EQ(json.at("schema"), "ksm.ledger/1");
  EXPECT_TRUE(json.at("no_forgetting").get<bool>());
  EXPECT_EQ(json.at("accuracy_matrix").size(), 3u);
}

TEST(CmdRun, RerunIsIdenticalApartFromTiming) {
  testing::TempDir a, b;
  std::ostringstream out, err;
  ASSERT_EQ(cmd_run(quick_run(a.path(), 2), out, err), kExitOk);
  ASSERT_EQ(cmd_run(quick_run(b.path(), 2), out, err), kExitOk);
  EXPECT_EQ(strip_seconds(testing::read_text(a / "ledger.csv")), strip_seconds(testing::read_text(b / "ledger.csv")));
  auto ja = nlohmann::json::parse(testing::read_text(a / "ledger.json"));
  auto jb = nlohmann::json::parse(testing::read_text(b / "ledger.json"));
  ja.erase("seconds");
  jb.erase("seconds");
  EXPECT_EQ(ja.dump(), jb.dump());
  for (const char* f : {"run.json", "backbone.ksmc", "task_1.ksm", "task_2.ksm", "task_3.ksm"})
    EXPECT_EQ(testing::read_text(a / f), testing::read_text(b / f)) << f;
}

TEST(CmdRun, UsageAndDataErrors) {
  testing::TempDir dir;
  std::ostringstream out, err;
  auto o = quick_run(dir.path(), 3);
  o.init_task = 7;
  EXPECT_EQ(cmd_run(o, out, err), kExitUsage);
  o = quick_run(dir.path(), 3, "cpg");
  EXPECT_EQ(cmd_run(o, out, err), kExitUsage);
  o = quick_run(dir.path(), 3);
  o.data.dataset = "cifar10";
  o.data.tasks = 6;
  EXPECT_EQ(cmd_run(o, out, err), kExitUsage);
  o.data.tasks = 5;
  o.data.data_dir = (dir / "nothing-here").string();
  EXPECT_EQ(cmd_run(o, out, err), kExitData);
}

TEST(CmdEval, ReproducesLedgerAndChecksProvenance) {
  testing::TempDir a, b;
  std::ostringstream out, err;
  ASSERT_EQ(cmd_run(quick_run(a.path(), 4), out, err), kExitOk);
  ASSERT_EQ(cmd_run(quick_run(b.path(), 5), out, err), kExitOk);
  const auto json = nlohmann::json::parse(testing::read_text(a / "ledger.json"));
  for (std::uint32_t id : {1u, 2u, 3u}) {
    EvalOptions e{(a / "backbone.ksmc").string(), (a / task_file_name(id)).string(), (a / "run.json").string(), {}};
    const auto first = eval_artifact(e, err);
    ASSERT_EQ(first.code, kExitOk) << err.str();
    EXPECT_EQ(first.result.accuracy, json.at("final_accuracy").at(id - 1).get<double>());
    std::ostringstream o1, o2;
    ASSERT_EQ(cmd_eval(e, o1, err), kExitOk);
    ASSERT_EQ(cmd_eval(e, o2, err), kExitOk);
    EXPECT_EQ(o1.str(), o2.str());
  }
  EvalOptions wrong{(b / "backbone.ksmc").string(), (a / "task_2.ksm").string(), (a / "run.json").string(), {}};
  EXPECT_EQ(cmd_eval(wrong, out, err), kExitProvenance);
  EvalOptions missing{(a / "backbone.ksmc").string(), (a / "task_9.ksm").string(), (a / "run.json").string(), {}};
  EXPECT_EQ(cmd_eval(missing, out, err), kExitData);
}

TEST(CmdStats, ReportsRatiosAndRejectsCorruptFiles) {
  testing::TempDir dir;
  std::ostringstream out, err;
  ASSERT_EQ(cmd_run(quick_run(dir.path(), 6), out, err), kExitOk);
  StatsOptions s;
  s.files = {(dir / "task_1.ksm").string(), (dir / "task_2.ksm").string()};
  s.csv_path = (dir / "stats.csv").string();
  s.json = true;
  std::ostringstream report;
  ASSERT_EQ(cmd_stats(s, report, err), kExitOk);
  const auto text = report.str();
  const auto json = nlohmann::json::parse(text.substr(text.find("{\n")));
  EXPECT_EQ(json.at("schema"), "ksm.stats/1");
  for (const auto& layer : json.at("files").at(0).at("layers")) EXPECT_EQ(layer.at("ones_ratio"), 1.0);
  EXPECT_EQ(json.at("files").at(0).at("overhead").at("stored_scales"), 0);
  for (const auto& file : json.at("files")) {
    EXPECT_EQ(file.at("overhead").at("element_wise_bits").get<std::size_t>(),
              9 * file.at("overhead").at("mask_bits").get<std::size_t>());
    for (const auto& layer : file.at("layers"))
      EXPECT_EQ(layer.at("ones_ratio").get<double>() + layer.at("scale_ratio").get<double>(), 1.0);
  }
  EXPECT_EQ(testing::read_text(dir / "stats.csv").rfind("layer,entries,ones,", 0), 0u);

  testing::write_bytes(dir / "bad.ksm", {'K', 'S', 'M', '1', 1, 0, 3});
  s.files = {(dir / "bad.ksm").string()};
  EXPECT_EQ(cmd_stats(s, out, err), kExitData);
  s.files = {(dir / "absent.ksm").string()};
  EXPECT_EQ(cmd_stats(s, out, err), kExitData);
}

TEST(Cli, ExitCodes) {
  testing::TempDir dir;
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), kExitUsage);
  EXPECT_EQ(run_cli("run --bogus-flag"), kExitUsage);
  EXPECT_EQ(run_cli("run --strategy nope --out " + dir.path().string()), kExitUsage);
  EXPECT_EQ(run_cli("run --tasks 0"), kExitUsage);
  EXPECT_EQ(run_cli("stats " + (dir / "absent.ksm").string()), kExitData);
  const std::string env = "KSM_DATA_DIR=" + (dir / "empty").string() + " ";
  const std::string cmd = env + KSM_CLI_PATH + " run --dataset cifar10 --out " + (dir / "o").string() + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  EXPECT_EQ(WEXITSTATUS(status), kExitData);
  const auto out = (dir / "run").string();
  EXPECT_EQ(run_cli("run --tasks 2 --epochs 1 --train-per-class 20 --test-per-class 10 --init-task 2 --out " + out), 0);
  EXPECT_EQ(run_cli("eval --checkpoint " + out + "/backbone.ksmc --mask " + out + "/task_1.ksm --run-config " + out +
                    "/run.json"),
            0);
  EXPECT_EQ(testing::read_text(dir / "run" / "ledger.csv").substr(0, 19), "task,acc,seconds\n2,");
}

}  // namespace
}  // namespace ksm
