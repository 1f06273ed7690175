// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "ksm/model.hpp"
#include "oracles.hpp"

namespace ksm {
namespace {

using T64 = Tensor<double>;

TEST(MaskedConv, KernelWiseMatchesScaleThenConvolve) {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<std::size_t> small(1, 4), stride(1, 2), pad(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    const ConvLayer layer{small(rng), small(rng), 3, stride(rng), pad(rng), false, false};
    const oracle::ConvShape s{small(rng), layer.in_channels, 5, 6, layer.out_channels, 3, 3, layer.stride, layer.pad};
    const auto x = oracle::random_vector(s.batch * s.c_in * s.height * s.width, rng);
    const auto w = oracle::random_vector(s.c_out * s.c_in * 9, rng);
    const auto m = oracle::random_vector(s.c_out * s.c_in, rng, 0.0, 1.0);
    const auto y = masked_conv_forward(T64({s.batch, s.c_in, s.height, s.width}, x), T64(layer.weight_shape(), w),
                                       layer, T64({s.c_out, s.c_in}, m));
    const auto expected = oracle::conv2d(x, oracle::scale_kernels(w, m, s.c_out, s.c_in, 9), s);
    EXPECT_LE(oracle::max_abs_diff(y.values(), expected), 1e-12);
  }
}

TEST(MaskedConv, ElementWiseMultipliesEachWeight) {
  std::mt19937_64 rng(22);
  const ConvLayer layer{2, 3, 3, 1, 1, false, false};
  const oracle::ConvShape s{2, 3, 4, 4, 2, 3, 3, 1, 1};
  const auto x = oracle::random_vector(2 * 3 * 16, rng);
  const auto w = oracle::random_vector(54, rng);
  const auto m = oracle::random_vector(54, rng, 0.0, 1.0);
  std::vector<double> wm(54);
  for (std::size_t i = 0; i < 54; ++i) wm[i] = w[i] * m[i];
  const auto y = masked_conv_forward(T64({2, 3, 4, 4}, x), T64(layer.weight_shape(), w), layer,
                                     T64(layer.weight_shape(), m), Granularity::kElementWise);
  EXPECT_LE(oracle::max_abs_diff(y.values(), oracle::conv2d(x, wm, s)), 1e-12);
  EXPECT_THROW(masked_conv_forward(T64({2, 3, 4, 4}, x), T64(layer.weight_shape(), w), layer, T64({3, 2})),
               DimensionError);
}

TEST(BackboneConfig, FeatureDimensions) {
  EXPECT_EQ(BackboneConfig::tiny(3, 8).feature_dim(), 32u);
  EXPECT_EQ(BackboneConfig::desk_default().feature_dim(), 256u);
  const auto vgg = BackboneConfig::vgg16_bn_cifar();
  EXPECT_EQ(vgg.convs().size(), 13u);
  EXPECT_EQ(vgg.feature_dim(), 512u);
  auto broken = BackboneConfig::tiny(3, 8);
  std::get<ConvLayer>(broken.layers[0]).out_channels = 5;
  EXPECT_THROW(broken.feature_dim(), DimensionError);
  EXPECT_THROW(Backbone<float>::init(broken, 0), DimensionError);
}

TEST(Backbone, ContentHashIsFnv1aOverFloat32) {
  auto b = Backbone<float>::init(BackboneConfig::tiny(1, 4), 3);
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& p : b.parameters())
    for (float v : p.data()) {
      unsigned char raw[4];
      std::memcpy(raw, &v, 4);
      for (unsigned char c : raw) h = (h ^ c) * 1099511628211ULL;
    }
  EXPECT_EQ(b.content_hash(), h);
  const auto before = b.content_hash();
  EXPECT_EQ(b.clone().content_hash(), before);
  b.conv_weights[0].data()[0] += 1.0f;
  EXPECT_NE(b.content_hash(), before);
}

TEST(Backbone, InitIsDeterministicInSeed) {
  const auto cfg = BackboneConfig::tiny(3, 8);
  EXPECT_EQ(Backbone<float>::init(cfg, 5).content_hash(), Backbone<float>::init(cfg, 5).content_hash());
  EXPECT_NE(Backbone<float>::init(cfg, 5).content_hash(), Backbone<float>::init(cfg, 6).content_hash());
}

TEST(Backbone, FreezeStopsGradients) {
  auto b = Backbone<double>::init(BackboneConfig::tiny(1, 4), 1);
  b.freeze();
  for (const auto& p : b.parameters()) EXPECT_FALSE(p.requires_grad());
  b.unfreeze();
  for (const auto& p : b.parameters()) EXPECT_TRUE(p.requires_grad());
}

// Plain forward through the backbone with the task's norms and head.
T64 reference_forward(const Backbone<double>& b, TaskArtifact<double>& a, const T64& x) {
  T64 h = x;
  std::size_t ci = 0, ni = 0, di = 0;
  for (const auto& l : b.config.layers) {
    if (const auto* c = std::get_if<ConvLayer>(&l)) {
      h = conv2d(h, b.conv_weights[ci++], c->stride, c->pad);
      if (c->norm) h = batch_norm2d(h, a.norms[ni++], Mode::kEval);
      if (c->relu) h = relu(h);
    } else if (const auto* p = std::get_if<PoolLayer>(&l)) {
      h = max_pool2d(h, p->size);
    } else {
      h = dense(flatten(h), b.dense_weights[di], b.dense_biases[di]);
      ++di;
      if (std::get<DenseLayer>(l).relu) h = relu(h);
    }
  }
  return dense(h, a.head_weight, a.head_bias);
}

TEST(MaskedModel, IdentityMaskedInitialTaskEqualsRawBackbone) {
  std::mt19937_64 rng(23);
  MaskedModel<double> model(Backbone<double>::init(BackboneConfig::tiny(2, 8), 4));
  auto a = model.make_initial_artifact(1, 3, strategy_from_name("ksm"), {}, 9);
  model.backbone().freeze();
  model.finalize(a);
  for (const auto& m : a.masks) EXPECT_EQ(m.ones(), m.size());
  auto& stored = model.add_task(std::move(a));
  const T64 x({2, 2, 8, 8}, oracle::random_vector(256, rng));
  EXPECT_EQ(model.forward_task(x, 1).values(), reference_forward(model.backbone(), stored, x).values());
}

TEST(MaskedModel, InitialMaskValueKeepsEveryKernel) {
  MaskedModel<double> model(Backbone<double>::init(BackboneConfig::tiny(2, 8), 4));
  auto initial = model.make_initial_artifact(1, 2, strategy_from_name("ksm"), {}, 1);
  model.backbone().freeze();
  for (const auto& s : kStrategies) {
    if (s.spec.finetune) continue;
    auto a = model.make_task_artifact(2, 2, s.spec, {}, initial, 2);
    model.finalize(a);
    for (const auto& m : a.masks) EXPECT_EQ(m.ones(), m.size()) << s.name;
  }
}

TEST(MaskedModel, TrainableParametersExcludeFrozenBackbone) {
  MaskedModel<double> model(Backbone<double>::init(BackboneConfig::tiny(2, 8), 4));
  auto initial = model.make_initial_artifact(1, 2, strategy_from_name("ksm"), {}, 1);
  model.add_task(initial);
  EXPECT_EQ(model.trainable_parameters(1).size(), model.backbone().parameters().size() + 2 + 2 * 4);
  model.backbone().freeze();
  model.add_task(model.make_task_artifact(2, 2, strategy_from_name("ksm"), {}, initial, 2));
  const auto params = model.trainable_parameters(2);
  EXPECT_EQ(params.size(), 4 + 2 + 2 * 4);
  for (const auto& p : params) EXPECT_TRUE(p.requires_grad());
  EXPECT_THROW(model.task(7), UnknownTaskError);
}

TEST(MaskedModel, MaskGradientReachesRealMasksOnly) {
  std::mt19937_64 rng(24);
  MaskedModel<double> model(Backbone<double>::init(BackboneConfig::tiny(2, 8), 4));
  auto initial = model.make_initial_artifact(1, 2, strategy_from_name("ksm"), {}, 1);
  model.backbone().freeze();
  auto& a = model.add_task(model.make_task_artifact(2, 2, strategy_from_name("ksm"), {}, initial, 2));
  const T64 x({4, 2, 8, 8}, oracle::random_vector(512, rng));
  backward(softmax_cross_entropy(model.forward(x, a, Mode::kTrain), std::vector<int>{0, 1, 1, 0}));
  double total = 0.0;
  for (const auto& m : a.real_masks)
    for (double g : m.grad()) total += std::abs(g);
  EXPECT_GT(total, 0.0);
  for (const auto& w : model.backbone().parameters()) EXPECT_FALSE(w.has_grad());
}

}  // namespace
}  // namespace ksm
