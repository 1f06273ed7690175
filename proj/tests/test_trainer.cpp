// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "ksm/report.hpp"
#include "ksm/trainer.hpp"

namespace ksm {
namespace {

SyntheticSpec small_spec(std::size_t tasks, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n_tasks = tasks;
  spec.train_per_class = 40;
  spec.test_per_class = 20;
  spec.seed = seed;
  return spec;
}

TrainConfig small_config(const char* strategy, int epochs, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.lr = 1e-2;
  cfg.seed = seed;
  cfg.strategy = strategy_from_name(strategy);
  return cfg;
}

TEST(Trainer, MaskStrategiesNeverForget) {
  const auto tasks = synthetic_tasks(small_spec(3, 1));
  for (const char* name : {"ksm", "piggyback-kerwise"}) {
    ContinualTrainer<float> trainer(BackboneConfig::tiny(3, 8), small_config(name, 2, 1));
    const auto ledger = trainer.run_sequence(tasks);
    EXPECT_TRUE(ledger.no_forgetting()) << name;
    EXPECT_EQ(ledger.task_order, (std::vector<std::uint32_t>{1, 2, 3}));
    for (double acc : ledger.final_accuracy) EXPECT_GT(acc, 60.0) << name;
  }
}

TEST(Trainer, BackboneReceivesNoGradientWhileLearningMasks) {
  const auto tasks = synthetic_tasks(small_spec(2, 2));
  ContinualTrainer<float> trainer(BackboneConfig::tiny(3, 8), small_config("ksm", 1, 2));
  trainer.train_initial(tasks[0]);
  const auto hash = trainer.model().backbone().content_hash();
  std::size_t steps = 0;
  trainer.set_step_observer([&](const TaskArtifact<float>& a, const MaskedModel<float>& m) {
    ++steps;
    for (const auto& w : m.backbone().parameters()) EXPECT_FALSE(w.has_grad());
    double total = 0.0;
    for (const auto& r : a.real_masks)
      for (float g : r.grad()) total += std::abs(g);
    EXPECT_GT(total, 0.0);
  });
  trainer.train_task(tasks[1]);
  EXPECT_GT(steps, 0u);
  EXPECT_EQ(trainer.model().backbone().content_hash(), hash);
  EXPECT_EQ(trainer.model().task(2).backbone_hash, hash);
}

TEST(Trainer, DetectsBackboneMutation) {
  const auto tasks = synthetic_tasks(small_spec(2, 3));
  ContinualTrainer<float> trainer(BackboneConfig::tiny(3, 8), small_config("ksm", 1, 3));
  trainer.train_initial(tasks[0]);
  trainer.model().backbone().conv_weights[0].data()[0] += 0.5f;
  EXPECT_THROW(trainer.train_task(tasks[1]), InvariantError);
}

TEST(Trainer, ContractViolations) {
  const auto tasks = synthetic_tasks(small_spec(2, 4));
  ContinualTrainer<float> trainer(BackboneConfig::tiny(3, 8), small_config("ksm", 1, 4));
  EXPECT_THROW(trainer.train_task(tasks[1]), ContractError);
  trainer.train_initial(tasks[0]);
  EXPECT_THROW(trainer.train_initial(tasks[1]), ContractError);
  trainer.train_task(tasks[1]);
  EXPECT_THROW(trainer.train_task(tasks[1]), ContractError);
  EXPECT_THROW(trainer.evaluate(9, tasks[0].test), UnknownTaskError);
}

TEST(Trainer, InitialTaskCanBeChosen) {
  const auto tasks = synthetic_tasks(small_spec(4, 5));
  auto cfg = small_config("ksm", 1, 5);
  cfg.initial_task = 3;
  ContinualTrainer<float> trainer(BackboneConfig::tiny(3, 8), cfg);
  const auto ledger = trainer.run_sequence(tasks);
  EXPECT_EQ(ledger.task_order, (std::vector<std::uint32_t>{3, 1, 2, 4}));
  EXPECT_TRUE(trainer.model().task(3).initial);
  EXPECT_FALSE(trainer.model().task(1).initial);
  cfg.initial_task = 9;
  ContinualTrainer<float> bad(BackboneConfig::tiny(3, 8), cfg);
  EXPECT_THROW(bad.run_sequence(tasks), UnknownTaskError);
}

TEST(Trainer, ZeroEpochsGivesUntrainedAccuracies) {
  const auto tasks = synthetic_tasks(small_spec(3, 6));
  ContinualTrainer<float> trainer(BackboneConfig::tiny(3, 8), small_config("ksm", 0, 6));
  const auto ledger = trainer.run_sequence(tasks);
  ASSERT_EQ(ledger.final_accuracy.size(), 3u);
  for (double acc : ledger.final_accuracy) {
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 100.0);
  }
  EXPECT_EQ(ledger.epochs, (std::vector<int>{0, 0, 0}));
}

TEST(Trainer, SameSeedSameLedger) {
  const auto tasks = synthetic_tasks(small_spec(3, 7));
  auto run = [&] {
    ContinualTrainer<float> trainer(BackboneConfig::tiny(3, 8), small_config("ours-elewise", 1, 7));
    return trainer.run_sequence(tasks);
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.final_accuracy, b.final_accuracy);
}

TEST(Trainer, FinetuneMovesTheBackbone) {
  const auto tasks = synthetic_tasks(small_spec(2, 8));
  ContinualTrainer<float> trainer(BackboneConfig::tiny(3, 8), small_config("finetune", 1, 8));
  trainer.train_initial(tasks[0]);
  const auto hash = trainer.model().backbone().content_hash();
  trainer.train_task(tasks[1]);
  EXPECT_NE(trainer.model().backbone().content_hash(), hash);
  EXPECT_TRUE(trainer.model().backbone().frozen);
}

TEST(Trainer, ForkMatchesAnIndependentRun) {
  const auto tasks = synthetic_tasks(small_spec(3, 4));
  ContinualTrainer<float> base(BackboneConfig::tiny(3, 8), small_config("piggyback", 2, 4));
  base.train_initial(tasks[0]);
  for (const char* name : {"ksm", "ours-softmax"}) {
    auto forked = base.fork(strategy_from_name(name));
    ContinualTrainer<float> fresh(BackboneConfig::tiny(3, 8), small_config(name, 2, 4));
    const auto a = forked.run_sequence(tasks), b = fresh.run_sequence(tasks);
    EXPECT_EQ(a.strategy, name);
    EXPECT_EQ(a.accuracy, b.accuracy) << name;
  }
  EXPECT_EQ(base.model().task_ids().size(), 1u);
  EXPECT_THROW(base.fork(strategy_from_name("finetune")), ContractError);
  ContinualTrainer<float> untrained(BackboneConfig::tiny(3, 8), small_config("ksm", 1, 4));
  EXPECT_THROW(untrained.fork(strategy_from_name("ksm")), ContractError);
}

TEST(Ledger, NoForgettingRequiresBitEqualRows) {
  RunLedger l;
  l.accuracy = {{50.0, 50.0}, {std::nullopt, 70.0}};
  EXPECT_TRUE(l.no_forgetting());
  l.accuracy[0][1] = std::nextafter(50.0, 51.0);
  EXPECT_FALSE(l.no_forgetting());
}

TEST(Report, RatiosSumToOneExactly) {
  for (std::uint32_t n = 1; n <= 400; ++n)
    for (std::uint32_t ones = 0; ones <= n; ++ones) {
      FrozenMask m{0, 1, n, std::vector<std::uint8_t>(n, 0), std::vector<float>(n - ones, 0.5f)};
      std::fill(m.bits.begin(), m.bits.begin() + ones, 1);
      const auto s = layer_stats(m);
      ASSERT_EQ(s.ones_ratio + s.scale_ratio, 1.0) << n << " " << ones;
    }
}

TEST(Report, KernelWiseBitsAreNinthOfElementWise) {
  const std::vector<FrozenMask> layers{FrozenMask::all_ones(0, 8, 3), FrozenMask::all_ones(1, 16, 8)};
  const std::vector<KernelGeometry> k3(2, KernelGeometry{3, 3});
  const auto r = overhead(layers, k3);
  EXPECT_EQ(r.element_wise_bits, 9 * r.mask_bits);
  EXPECT_DOUBLE_EQ(r.reduction, 9.0);
  EXPECT_EQ(r.stored_scales, 0u);
  EXPECT_EQ(r.mask_bytes, r.binary_bytes);
  EXPECT_EQ(layer_stats(layers[1]).ones_ratio, 1.0);
}

TEST(Report, CsvHasHeaderRow) {
  RunLedger l;
  l.task_order = {2, 1};
  l.final_accuracy = {50.0, 75.5};
  l.seconds = {0.125, 1.0};
  EXPECT_EQ(ledger_csv(l), "task,acc,seconds\n2,50.0000,0.1250\n1,75.5000,1.0000\n");
  EXPECT_EQ(ledger_json(l).at("schema"), "ksm.ledger/1");
  EXPECT_EQ(stats_csv({}), "layer,entries,ones,ones_ratio,scale_ratio,mean_scale\n");
}

}  // namespace
}  // namespace ksm
