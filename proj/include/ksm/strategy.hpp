// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <random>
#include <string>
#include <string_view>

#include "ksm/mask.hpp"
#include "ksm/ops.hpp"

namespace ksm {

enum class Granularity { kElementWise, kKernelWise };
enum class MaskValue { kBinary, kSoft };
enum class GradientRule { kSte, kSoftmaxTrick };

/// One row of the ablation grid, or whole-network fine-tuning.
struct StrategySpec {
  bool finetune = false;
  Granularity granularity = Granularity::kKernelWise;
  MaskValue value = MaskValue::kSoft;
  GradientRule rule = GradientRule::kSoftmaxTrick;

  static constexpr StrategySpec mask(Granularity g, MaskValue v, GradientRule r) {
    return StrategySpec{false, g, v, r};
  }
  static constexpr StrategySpec finetune_all() { return StrategySpec{true, {}, {}, {}}; }

  friend bool operator==(const StrategySpec&, const StrategySpec&) = default;
};

struct NamedStrategy {
  std::string_view name;
  StrategySpec spec;
};

inline constexpr std::array<NamedStrategy, 7> kStrategies{{
    {"piggyback", StrategySpec::mask(Granularity::kElementWise, MaskValue::kBinary, GradientRule::kSte)},
    {"piggyback-kerwise", StrategySpec::mask(Granularity::kKernelWise, MaskValue::kBinary, GradientRule::kSte)},
    {"piggyback-soft", StrategySpec::mask(Granularity::kElementWise, MaskValue::kSoft, GradientRule::kSte)},
    {"ours-softmax", StrategySpec::mask(Granularity::kKernelWise, MaskValue::kBinary, GradientRule::kSoftmaxTrick)},
    {"ours-elewise", StrategySpec::mask(Granularity::kElementWise, MaskValue::kSoft, GradientRule::kSoftmaxTrick)},
    {"ksm", StrategySpec::mask(Granularity::kKernelWise, MaskValue::kSoft, GradientRule::kSoftmaxTrick)},
    {"finetune", StrategySpec::finetune_all()},
}};

/// The six mask rows of the ablation grid; any other combination is rejected.
inline bool is_known(const StrategySpec& spec) {
  for (const auto& s : kStrategies)
    if (s.spec == spec) return true;
  return false;
}

inline std::string strategy_name(const StrategySpec& spec) {
  for (const auto& s : kStrategies)
    if (s.spec == spec) return std::string(s.name);
  throw ContractError("unknown strategy combination");
}

inline StrategySpec strategy_from_name(std::string_view name) {
  if (name == "ours-full") name = "ksm";
  for (const auto& s : kStrategies)
    if (s.name == name) return s.spec;
  throw ContractError("unknown strategy '" + std::string(name) + "'");
}

/// Forward: [Mr >= tau]. Backward: the gradient passes through unchanged.
template <std::floating_point T>
Tensor<T> ste_binarize(const Tensor<T>& real_mask, double tau) {
  const T t = static_cast<T>(tau);
  std::vector<T> bits(real_mask.numel());
  for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = real_mask.data()[i] >= t ? T(1) : T(0);
  return make_op<T>("ste_binarize", real_mask.shape(), std::move(bits), {real_mask},
                    [](std::span<const T> g, std::span<std::vector<T>* const> in) {
                      for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
                    });
}

/// Binary part, scaling part and their differentiable sum for one layer.
template <std::floating_point T>
struct MaskParts {
  Tensor<T> bits;
  Tensor<T> scales;
  Tensor<T> soft;
};

/// Forward/backward mask chain for one strategy.
class MaskPipeline {
 public:
  explicit MaskPipeline(StrategySpec spec) : spec_(spec) {}

  const StrategySpec& spec() const { return spec_; }
  bool finetune() const { return spec_.finetune; }
  bool kernel_wise() const { return spec_.granularity == Granularity::kKernelWise; }

  /// (Cout, Cin) for kernel-wise masks, the full weight shape otherwise.
  Shape mask_shape(const Shape& weight) const {
    if (weight.size() != 4) throw DimensionError("mask_shape: weight must be rank 4");
    return kernel_wise() ? Shape{weight[0], weight[1]} : weight;
  }

  /// (rows, cols) used by the mask file: cols folds kh*kw for element-wise masks.
  std::pair<std::uint32_t, std::uint32_t> stored_dims(const Shape& weight) const {
    const auto cols = kernel_wise() ? weight[1] : weight[1] * weight[2] * weight[3];
    return {static_cast<std::uint32_t>(weight[0]), static_cast<std::uint32_t>(cols)};
  }

  template <std::floating_point T>
  Tensor<T> init_real_mask(const Shape& weight, const MaskHyperparams& hp) const {
    return Tensor<T>::full(mask_shape(weight), static_cast<T>(hp.init_value), true);
  }

  template <std::floating_point T>
  MaskParts<T> live(const Tensor<T>& real, const MaskHyperparams& hp,
                    std::mt19937_64* noise_rng = nullptr) const {
    if (finetune()) throw ContractError("finetune strategy has no mask");
    Tensor<T> bits;
    if (spec_.rule == GradientRule::kSte) {
      bits = ste_binarize(real, hp.tau);
    } else {
      Tensor<T> sigma = relax_sigmoid(real, hp);
      Tensor<T> q = (hp.gumbel_noise && noise_rng)
                        ? keep_probability(sigma, hp.temperature, *noise_rng)
                        : keep_probability(sigma, hp.temperature);
      bits = harden(q);
    }
    if (spec_.value == MaskValue::kBinary) {
      Tensor<T> zeros(real.shape());
      return {bits, zeros, bits};
    }
    Tensor<T> scales = scaling_tensor(real, bits);
    return {bits, scales, compose_soft_mask(bits, scales)};
  }

  /// Effective weight W * M (kernel-broadcast for kernel-wise masks).
  template <std::floating_point T>
  Tensor<T> apply(const Tensor<T>& weight, const Tensor<T>& mask) const {
    if (kernel_wise()) return kernel_scale(weight, mask);
    return mul(weight, mask);
  }

  template <std::floating_point T>
  FrozenMask freeze(std::uint32_t layer_id, const Tensor<T>& real, const Shape& weight,
                    const MaskHyperparams& hp) const {
    const auto parts = live(real.detach(), hp);
    const auto [rows, cols] = stored_dims(weight);
    return FrozenMask::from_parts<T>(layer_id, rows, cols, parts.bits.data(), parts.scales.data());
  }

  template <std::floating_point T>
  Tensor<T> frozen_tensor(const FrozenMask& m, const Shape& weight) const {
    const auto [rows, cols] = stored_dims(weight);
    if (m.rows != rows || m.cols != cols) {
      throw DimensionError("stored mask " + std::to_string(m.rows) + "x" + std::to_string(m.cols) +
                           " does not fit weight " + shape_str(weight));
    }
    return Tensor<T>(mask_shape(weight), m.dense<T>(), false);
  }

 private:
  StrategySpec spec_;
};

/// Builds the mask chain for a row of the ablation grid (or fine-tuning).
inline MaskPipeline make_strategy(const StrategySpec& spec) {
  if (!is_known(spec)) throw ContractError("unknown strategy combination");
  return MaskPipeline(spec);
}

}  // namespace ksm
