// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#include <malloc.h>

#include <iostream>

#include <CLI11.hpp>

#include "ksm/commands.hpp"

namespace {

void add_dataset_flags(CLI::App* cmd, ksm::DatasetOptions& d) {
  cmd->add_option("--dataset", d.dataset, "synthetic, cifar10 or cifar100")
      ->check(CLI::IsMember({"synthetic", "cifar10", "cifar100"}));
  cmd->add_option("--tasks", d.tasks, "number of tasks")->check(CLI::PositiveNumber);
  cmd->add_option("--classes-per-task", d.classes_per_task)->check(CLI::PositiveNumber);
  cmd->add_option("--seed", d.seed);
  cmd->add_option("--data-dir", d.data_dir, "dataset directory (default: $KSM_DATA_DIR)");
  cmd->add_option("--side", d.side, "synthetic image side")->check(CLI::PositiveNumber);
  cmd->add_option("--train-per-class", d.train_per_class)->check(CLI::PositiveNumber);
  cmd->add_option("--test-per-class", d.test_per_class)->check(CLI::PositiveNumber);
  cmd->add_option("--separation", d.separation);
  cmd->add_option("--noise", d.noise);
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  CLI::App app{"Kernel-wise soft mask continual learning"};
  app.require_subcommand(1);

  ksm::RunOptions run;
  auto* run_cmd = app.add_subcommand("run", "train a task sequence and write ledgers and artifacts");
  add_dataset_flags(run_cmd, run.data);
  std::uint32_t init_task = 0;
  run_cmd->add_option("--strategy", run.strategy, "ksm, piggyback, piggyback-kerwise, piggyback-soft, "
                                                  "ours-softmax, ours-elewise, finetune");
  run_cmd->add_option("--backbone", run.backbone, "auto, tiny, desk or vgg16")
      ->check(CLI::IsMember({"auto", "tiny", "desk", "vgg16"}));
  run_cmd->add_option("--epochs", run.epochs)->check(CLI::NonNegativeNumber);
  run_cmd->add_option("--initial-epochs", run.initial_epochs);
  run_cmd->add_option("--batch", run.batch)->check(CLI::PositiveNumber);
  run_cmd->add_option("--lr", run.lr);
  run_cmd->add_option("--initial-lr", run.initial_lr);
  auto* init_opt = run_cmd->add_option("--init-task", init_task, "task trained from scratch first");
  run_cmd->add_option("--k", run.hp.k, "sigmoid slope");
  run_cmd->add_option("--tau", run.hp.tau, "threshold");
  run_cmd->add_option("--temperature", run.hp.temperature);
  run_cmd->add_option("--init-value", run.hp.init_value, "initial real-valued mask");
  run_cmd->add_option("--out", run.out, "output directory");

  ksm::StatsOptions stats;
  std::uint32_t kernel = 0;
  auto* stats_cmd = app.add_subcommand("stats", "per-layer mask statistics and storage overhead");
  stats_cmd->add_option("files", stats.files, "mask files")->required();
  auto* kernel_opt = stats_cmd->add_option("--kernel", kernel, "kernel side for files without geometry");
  stats_cmd->add_option("--csv", stats.csv_path, "write per-layer CSV");
  stats_cmd->add_flag("--json", stats.json, "print a JSON report");

  ksm::EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a saved task artifact");
  eval_cmd->add_option("--checkpoint", eval.checkpoint)->required();
  eval_cmd->add_option("--mask", eval.mask)->required();
  eval_cmd->add_option("--run-config", eval.run_config, "run.json providing the dataset options");
  add_dataset_flags(eval_cmd, eval.data);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return ksm::kExitUsage;
  }

  try {
    if (*run_cmd) {
      if (*init_opt) run.init_task = init_task;
      const int code = ksm::cmd_run(run, std::cout, std::cerr);
      if (code == ksm::kExitUsage) std::cerr << run_cmd->help();
      return code;
    }
    if (*stats_cmd) {
      if (*kernel_opt) stats.kernel = kernel;
      return ksm::cmd_stats(stats, std::cout, std::cerr);
    }
    return ksm::cmd_eval(eval, std::cout, std::cerr);
  } catch (const ksm::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
