// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>

#include "ksm/strategy.hpp"
#include "oracles.hpp"

namespace ksm {
namespace {

using T64 = Tensor<double>;

TEST(Strategy, NamesRoundTrip) {
  for (const auto& s : kStrategies) {
    EXPECT_EQ(strategy_name(strategy_from_name(s.name)), s.name);
    EXPECT_TRUE(is_known(s.spec));
  }
  EXPECT_EQ(strategy_from_name("ours-full"), strategy_from_name("ksm"));
  EXPECT_THROW(strategy_from_name("cpg"), ContractError);
}

TEST(Strategy, OnlyAblationGridCombinationsAreAccepted) {
  int accepted = 0;
  for (auto g : {Granularity::kKernelWise, Granularity::kElementWise})
    for (auto v : {MaskValue::kBinary, MaskValue::kSoft})
      for (auto r : {GradientRule::kSte, GradientRule::kSoftmaxTrick}) {
        const auto spec = StrategySpec::mask(g, v, r);
        if (is_known(spec)) {
          ++accepted;
          EXPECT_NO_THROW(make_strategy(spec));
        } else {
          EXPECT_THROW(make_strategy(spec), ContractError);
        }
      }
  EXPECT_EQ(accepted, 6);
  EXPECT_FALSE(is_known(StrategySpec::mask(Granularity::kElementWise, MaskValue::kBinary, GradientRule::kSoftmaxTrick)));
}

TEST(Ste, ForwardThresholdsBackwardIsIdentity) {
  T64 mr({4}, {-0.1, 0.0, 0.2, -0.3}, true);
  const auto b = ste_binarize(mr, 0.0);
  EXPECT_EQ(b.values(), (std::vector<double>{0, 1, 1, 0}));
  const T64 w({4}, {1, 2, 3, 4});
  backward(sum(mul(b, w)));
  EXPECT_EQ(std::vector<double>(mr.grad().begin(), mr.grad().end()), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Pipeline, MaskShapesFollowGranularity) {
  const Shape w{8, 4, 3, 3};
  const auto kw = make_strategy(strategy_from_name("ksm"));
  const auto ew = make_strategy(strategy_from_name("piggyback"));
  EXPECT_EQ(kw.mask_shape(w), (Shape{8, 4}));
  EXPECT_EQ(ew.mask_shape(w), w);
  EXPECT_EQ(kw.stored_dims(w), (std::pair<std::uint32_t, std::uint32_t>{8, 4}));
  EXPECT_EQ(ew.stored_dims(w), (std::pair<std::uint32_t, std::uint32_t>{8, 36}));
  EXPECT_THROW(make_strategy(StrategySpec::finetune_all()).live(T64({1}), MaskHyperparams{}), ContractError);
}

TEST(Pipeline, EveryMaskStrategyPassesGradientToRealMask) {
  std::mt19937_64 rng(5);
  MaskHyperparams hp;
  for (const auto& s : kStrategies) {
    if (s.spec.finetune) continue;
    const auto pipe = make_strategy(s.spec);
    const Shape wshape{3, 2, 3, 3};
    const T64 weight(wshape, oracle::random_vector(54, rng));
    const auto mshape = pipe.mask_shape(wshape);
    T64 real(mshape, oracle::random_vector(numel_of(mshape), rng, -0.1, 0.1), true);
    const auto parts = pipe.live(real, hp);
    for (std::size_t i = 0; i < parts.bits.numel(); ++i) {
      const double b = parts.bits.data()[i];
      ASSERT_TRUE(b == 0.0 || b == 1.0);
      if (s.spec.value == MaskValue::kBinary || b == 1.0) EXPECT_EQ(parts.scales.data()[i], 0.0) << s.name;
    }
    backward(sum(mul(pipe.apply(weight, parts.soft), weight)));
    double total = 0.0;
    for (double g : real.grad()) total += std::abs(g);
    EXPECT_GT(total, 0.0) << s.name;
  }
}

TEST(Pipeline, KernelWiseApplyBroadcastsOverKernel) {
  std::mt19937_64 rng(6);
  const auto w = oracle::random_vector(2 * 3 * 9, rng);
  const auto m = oracle::random_vector(6, rng, 0.0, 1.0);
  const auto y = make_strategy(strategy_from_name("ksm")).apply(T64({2, 3, 3, 3}, w), T64({2, 3}, m));
  EXPECT_EQ(y.values(), oracle::scale_kernels(w, m, 2, 3, 9));
}

TEST(Pipeline, FreezeReproducesLiveMask) {
  std::mt19937_64 rng(7);
  MaskHyperparams hp;
  for (const auto& s : kStrategies) {
    if (s.spec.finetune) continue;
    const auto pipe = make_strategy(s.spec);
    const Shape wshape{4, 3, 3, 3};
    const auto mshape = pipe.mask_shape(wshape);
    const Tensor<float> real(mshape, [&] {
      std::vector<float> v(numel_of(mshape));
      for (auto& x : v) x = float(oracle::random_vector(1, rng, -0.1, 0.1)[0]);
      return v;
    }());
    const auto frozen = pipe.freeze<float>(2, real, wshape, hp);
    EXPECT_EQ(frozen.layer_id, 2u);
    EXPECT_EQ(pipe.frozen_tensor<float>(frozen, wshape).values(), pipe.live(real, hp).soft.values()) << s.name;
    if (s.spec.value == MaskValue::kBinary) {
      for (float v : frozen.scales) EXPECT_EQ(v, 0.0f);
    }
  }
}

}  // namespace
}  // namespace ksm
