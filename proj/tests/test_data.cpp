// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>

#include "ksm/data.hpp"
#include "support.hpp"

namespace ksm {
namespace {

TEST(Cifar, ParsesTenAndHundredRecords) {
  const auto ten = parse_cifar(testing::fake_cifar_records({3, 9, 0}, 1, 1), CifarVariant::k10);
  EXPECT_EQ(ten.labels, (std::vector<int>{3, 9, 0}));
  EXPECT_EQ(ten.images.size(), 3u * 3072);
  EXPECT_NO_THROW(ten.validate());
  const auto raw = testing::fake_cifar_records({42, 99}, 2, 2);
  const auto hundred = parse_cifar(raw, CifarVariant::k100);
  EXPECT_EQ(hundred.labels, (std::vector<int>{42, 99}));
  EXPECT_EQ(hundred.image(1)[0], raw[3074 + 2]);
}

TEST(Cifar, RejectsPartialRecordsAndBadLabels) {
  auto raw = testing::fake_cifar_records({1}, 1, 3);
  raw.pop_back();
  try {
    parse_cifar(raw, CifarVariant::k10);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::kBadRecordSize);
  }
  EXPECT_THROW(parse_cifar(testing::fake_cifar_records({12}, 1, 3), CifarVariant::k10), FormatError);
}

TEST(Cifar, LoadsDirectoryOrParentAndReportsMissingData) {
  testing::TempDir dir;
  EXPECT_THROW(load_cifar(dir.path(), CifarVariant::k10), DataMissingError);
  const auto root = dir / "cifar-10-batches-bin";
  std::filesystem::create_directories(root);
  for (int i = 1; i <= 5; ++i)
    testing::write_bytes(root / ("data_batch_" + std::to_string(i) + ".bin"),
                         testing::fake_cifar_records({i, i + 1}, 1, i));
  testing::write_bytes(root / "test_batch.bin", testing::fake_cifar_records({0, 5, 7}, 1, 9));
  const auto from_parent = load_cifar(dir.path(), CifarVariant::k10);
  const auto direct = load_cifar(root, CifarVariant::k10);
  EXPECT_EQ(from_parent.train.size(), 10u);
  EXPECT_EQ(from_parent.test.size(), 3u);
  EXPECT_EQ(from_parent.train.labels, direct.train.labels);
}

DatasetSplits fake_splits() {
  std::vector<int> labels;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 10; ++c) labels.push_back(c);
  return {parse_cifar(testing::fake_cifar_records(labels, 1, 4), CifarVariant::k10),
          parse_cifar(testing::fake_cifar_records(labels, 1, 5), CifarVariant::k10)};
}

TEST(SplitTasks, DisjointDeterministicWithLocalLabels) {
  const auto ds = fake_splits();
  const auto a = split_tasks(ds, 5, 2, 11);
  const auto b = split_tasks(ds, 5, 2, 11);
  std::set<int> seen;
  for (std::size_t t = 0; t < a.size(); ++t) {
    EXPECT_EQ(a[t].id, t + 1);
    EXPECT_EQ(a[t].classes, b[t].classes);
    for (int c : a[t].classes) EXPECT_TRUE(seen.insert(c).second);
    EXPECT_EQ(a[t].train.size(), 6u);
    for (int l : a[t].train.labels) EXPECT_TRUE(l == 0 || l == 1);
  }
  EXPECT_EQ(seen.size(), 10u);
  EXPECT_NE(split_tasks(ds, 5, 2, 12)[0].classes, a[0].classes);
  EXPECT_THROW(split_tasks(ds, 6, 2, 0), ContractError);
}

TEST(Synthetic, DeterministicInSeedAndSized) {
  SyntheticSpec spec;
  spec.seed = 3;
  const auto a = synthetic_tasks(spec), b = synthetic_tasks(spec);
  ASSERT_EQ(a.size(), 5u);
  EXPECT_EQ(a[2].train.images, b[2].train.images);
  EXPECT_EQ(a[0].train.size(), 200u);
  EXPECT_EQ(a[0].test.size(), 100u);
  EXPECT_EQ(a[4].classes, (std::vector<int>{8, 9}));
  spec.seed = 4;
  EXPECT_NE(synthetic_tasks(spec)[2].train.images, a[2].train.images);
}

TEST(Batch, NormalizesPerChannel) {
  TaskData d{2, 1, 1, {255, 0, 51, 102}, {1, 0}, {0.5f, 0.2f}, {0.25f, 0.4f}};
  const std::vector<std::size_t> idx{1, 0};
  const auto x = make_batch<double>(d, idx);
  EXPECT_EQ(x.shape(), (Shape{2, 2, 1, 1}));
  EXPECT_NEAR(x.data()[0], (0.2 - 0.5) / 0.25, 1e-6);
  EXPECT_NEAR(x.data()[3], (0.0 - 0.2) / 0.4, 1e-6);
  EXPECT_EQ(batch_labels(d, idx), (std::vector<int>{0, 1}));
}

}  // namespace
}  // namespace ksm
