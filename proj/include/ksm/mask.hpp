// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ksm/ops.hpp"
#include "ksm/tensor.hpp"

namespace ksm {

/// Hyperparameters of the relaxed mask chain. Serialized next to every mask.
struct MaskHyperparams {
  double k = 20.0;            // logistic steepness
  double tau = 0.0;           // binarization threshold
  double temperature = 0.5;   // softmax-trick temperature
  double init_value = 0.01;   // initial real-mask entry
  bool gumbel_noise = false;  // perturb the keep logit with logistic noise while training

  void validate() const {
    if (!(k > 0.0)) throw ContractError("mask hyperparams: k must be > 0");
    if (!(temperature > 0.0)) throw ContractError("mask hyperparams: temperature must be > 0");
    if (!std::isfinite(tau) || !std::isfinite(init_value)) {
      throw ContractError("mask hyperparams: tau and init_value must be finite");
    }
  }
};

inline constexpr double kProbabilityClamp = 1e-7;

/// sigma = 1 / (1 + exp(-k (Mr - tau))), derivative k sigma (1 - sigma).
template <std::floating_point T>
Tensor<T> relax_sigmoid(const Tensor<T>& real_mask, const MaskHyperparams& hp) {
  hp.validate();
  const T k = static_cast<T>(hp.k), tau = static_cast<T>(hp.tau);
  std::vector<T> sigma(real_mask.numel());
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    sigma[i] = T(1) / (T(1) + std::exp(-k * (real_mask.data()[i] - tau)));
  }
  auto saved = sigma;
  return make_op<T>("relax_sigmoid", real_mask.shape(), std::move(sigma), {real_mask},
                    [saved = std::move(saved), k](std::span<const T> g,
                                                  std::span<std::vector<T>* const> in) {
                      for (std::size_t i = 0; i < g.size(); ++i)
                        (*in[0])[i] += g[i] * k * saved[i] * (T(1) - saved[i]);
                    });
}

namespace detail {

template <std::floating_point T>
Tensor<T> keep_probability_impl(const Tensor<T>& sigma, double temperature,
                                std::span<const T> logit_noise) {
  if (!(temperature > 0.0)) throw ContractError("keep_probability: temperature must be > 0");
  const T lo = static_cast<T>(kProbabilityClamp), hi = T(1) - lo;
  const T temp = static_cast<T>(temperature);
  const std::size_t n = sigma.numel();
  std::vector<T> q(n), dq(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T raw = sigma.data()[i];
    const T s = std::clamp(raw, lo, hi);
    // class-1 branch of the two-way softmax over (log(1-s), log s) / T
    T logit = std::log(s) - std::log1p(-s);
    if (!logit_noise.empty()) logit += logit_noise[i];
    const T qi = T(1) / (T(1) + std::exp(-logit / temp));
    q[i] = qi;
    const bool clamped = raw < lo || raw > hi;
    dq[i] = clamped ? T(0) : qi * (T(1) - qi) / (temp * s * (T(1) - s));
  }
  return make_op<T>("keep_probability", sigma.shape(), std::move(q), {sigma},
                    [dq = std::move(dq)](std::span<const T> g, std::span<std::vector<T>* const> in) {
                      for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * dq[i];
                    });
}

}  // namespace detail

/// Keep-probability q = s^(1/T) / (s^(1/T) + (1-s)^(1/T)), sigma clamped to
/// [1e-7, 1 - 1e-7]. dq/dsigma = q (1 - q) / (T sigma (1 - sigma)).
template <std::floating_point T>
Tensor<T> keep_probability(const Tensor<T>& sigma, double temperature) {
  return detail::keep_probability_impl<T>(sigma, temperature, {});
}

/// Same as above with a logistic perturbation (difference of two Gumbel
/// draws) added to the keep logit.
template <std::floating_point T>
Tensor<T> keep_probability(const Tensor<T>& sigma, double temperature, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uniform(1e-12, 1.0 - 1e-12);
  std::vector<T> noise(sigma.numel());
  for (auto& v : noise) {
    const double u = uniform(rng);
    v = static_cast<T>(std::log(u) - std::log1p(-u));
  }
  return detail::keep_probability_impl<T>(sigma, temperature, noise);
}

/// Forward: bit = [q >= 0.5]. Backward: straight through onto q.
template <std::floating_point T>
Tensor<T> harden(const Tensor<T>& q) {
  std::vector<T> bits(q.numel());
  for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = q.data()[i] >= T(0.5) ? T(1) : T(0);
  return make_op<T>("harden", q.shape(), std::move(bits), {q},
                    [](std::span<const T> g, std::span<std::vector<T>* const> in) {
                      for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
                    });
}

/// Min-max normalization of the whole tensor to [0, 1]; a constant tensor
/// maps to 0.5 everywhere.
template <std::floating_point T>
std::vector<T> minmax_normalize(std::span<const T> values) {
  std::vector<T> out(values.size(), T(0.5));
  if (values.empty()) return out;
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  const T lo = *mn, range = *mx - *mn;
  if (!(range > T(0))) return out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = std::clamp((values[i] - lo) / range, T(0), T(1));
  }
  return out;
}

/// A^s = (1 - bits) * normal(Mr), computed on detached values. Carries no gradient.
template <std::floating_point T>
Tensor<T> scaling_tensor(const Tensor<T>& real_mask, const Tensor<T>& bits) {
  detail::require_same_shape("scaling_tensor", real_mask.shape(), bits.shape());
  std::vector<T> scales = minmax_normalize<T>(real_mask.data());
  for (std::size_t i = 0; i < scales.size(); ++i) {
    const T b = bits.data()[i];
    if (b != T(0) && b != T(1)) throw InvariantError("scaling_tensor: mask is not binary");
    scales[i] *= (T(1) - b);
  }
  return Tensor<T>(real_mask.shape(), std::move(scales), false);
}

/// M = bits + scales with disjoint support.
template <std::floating_point T>
Tensor<T> compose_soft_mask(const Tensor<T>& bits, const Tensor<T>& scales) {
  detail::require_same_shape("compose_soft_mask", bits.shape(), scales.shape());
  for (std::size_t i = 0; i < bits.numel(); ++i) {
    if (bits.data()[i] * scales.data()[i] != T(0)) {
      throw InvariantError("compose_soft_mask: scale at index " + std::to_string(i) +
                           " overlaps a kept entry");
    }
  }
  return add(bits, scales);
}

/// Kernel-wise soft mask from a real mask, differentiable through
/// relax -> keep_probability -> harden (straight-through).
template <std::floating_point T>
Tensor<T> ksm_soft_mask(const Tensor<T>& real_mask, const MaskHyperparams& hp,
                        std::mt19937_64* noise_rng = nullptr) {
  Tensor<T> sigma = relax_sigmoid(real_mask, hp);
  Tensor<T> q = (hp.gumbel_noise && noise_rng) ? keep_probability(sigma, hp.temperature, *noise_rng)
                                               : keep_probability(sigma, hp.temperature);
  Tensor<T> bits = harden(q);
  return compose_soft_mask(bits, scaling_tensor(real_mask, bits));
}

/// Mask element count when one scalar is shared per kh x kw kernel.
inline std::size_t kernel_wise_count(std::size_t c_out, std::size_t c_in) { return c_out * c_in; }
inline std::size_t element_wise_count(std::size_t c_out, std::size_t c_in, std::size_t kh,
                                      std::size_t kw) {
  return c_out * c_in * kh * kw;
}

/// A finished soft mask: one bit per entry plus a 32-bit scale for every
/// zero bit, in ascending index order. `cols` is Cin for kernel-wise masks
/// and Cin*kh*kw for element-wise ones.
struct FrozenMask {
  std::uint32_t layer_id = 0;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<std::uint8_t> bits;
  std::vector<float> scales;

  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
  std::size_t ones() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
  std::size_t zeros() const { return size() - ones(); }

  void validate() const {
    if (bits.size() != size()) throw InvariantError("frozen mask: bit count != rows*cols");
    for (auto b : bits)
      if (b > 1) throw InvariantError("frozen mask: bit value out of range");
    if (scales.size() != zeros()) throw InvariantError("frozen mask: scale count != zero bits");
    for (float s : scales)
      if (!(s >= 0.0f && s <= 1.0f)) throw InvariantError("frozen mask: scale outside [0,1]");
  }

  /// Dense values (1 on kept entries, the stored scale elsewhere).
  template <std::floating_point T>
  std::vector<T> dense() const {
    std::vector<T> out(size());
    std::size_t next = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = bits[i] ? T(1) : static_cast<T>(scales.at(next++));
    }
    return out;
  }

  /// Builds the stored form from a binary mask and its scaling tensor (same
  /// length). Scales are rounded to float.
  template <std::floating_point T>
  static FrozenMask from_parts(std::uint32_t layer_id, std::uint32_t rows, std::uint32_t cols,
                               std::span<const T> bits, std::span<const T> scales) {
    FrozenMask m{layer_id, rows, cols, {}, {}};
    if (bits.size() != m.size() || scales.size() != m.size()) {
      throw DimensionError("frozen mask: value count mismatch");
    }
    m.bits.resize(bits.size());
    for (std::size_t i = 0; i < bits.size(); ++i) {
      if (bits[i] == T(1)) {
        if (scales[i] != T(0)) throw InvariantError("frozen mask: scale on a kept entry");
        m.bits[i] = 1;
      } else if (bits[i] == T(0)) {
        m.bits[i] = 0;
        m.scales.push_back(static_cast<float>(scales[i]));
      } else {
        throw InvariantError("frozen mask: mask is not binary");
      }
    }
    m.validate();
    return m;
  }

  static FrozenMask all_ones(std::uint32_t layer_id, std::uint32_t rows, std::uint32_t cols) {
    return FrozenMask{layer_id, rows, cols, std::vector<std::uint8_t>(std::size_t(rows) * cols, 1), {}};
  }

  friend bool operator==(const FrozenMask&, const FrozenMask&) = default;
};

/// Largest relative error between the autodiff gradient of a random linear
/// functional of q = keep_probability(relax_sigmoid(Mr)) and central finite
/// differences. Real-mask entries are drawn within 3/k of tau so the chain is
/// not saturated.
inline double mask_chain_gradient_check(const MaskHyperparams& hp, const Shape& shape,
                                        std::uint64_t seed, double step = 1e-5) {
  hp.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> offset(-3.0 / hp.k, 3.0 / hp.k);
  std::uniform_real_distribution<double> coeff(-1.0, 1.0);
  const std::size_t n = numel_of(shape);
  std::vector<double> mr(n), c(n);
  for (std::size_t i = 0; i < n; ++i) {
    mr[i] = hp.tau + offset(rng);
    c[i] = coeff(rng);
  }
  const Tensor<double> weights(shape, c);
  auto objective = [&](const Tensor<double>& m) {
    return sum(mul(keep_probability(relax_sigmoid(m, hp), hp.temperature), weights));
  };

  Tensor<double> real(shape, mr, true);
  backward(objective(real));
  const auto analytic = real.grad();

  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto plus = mr, minus = mr;
    plus[i] += step;
    minus[i] -= step;
    const double fp = objective(Tensor<double>(shape, plus)).item();
    const double fm = objective(Tensor<double>(shape, minus)).item();
    const double numeric = (fp - fm) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-7});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace ksm
