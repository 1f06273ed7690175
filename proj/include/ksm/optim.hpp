// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ksm/tensor.hpp"

namespace ksm {

enum class OptimizerKind { kSgd, kAdam };

/// Step decay: the rate is multiplied by `factor` at every milestone epoch.
struct LrSchedule {
  double initial = 1e-4;
  std::vector<int> milestones;
  double factor = 0.1;

  double at_epoch(int epoch) const {
    int passed = 0;
    for (int m : milestones) passed += (epoch >= m) ? 1 : 0;
    return initial * std::pow(factor, passed);
  }
};

template <std::floating_point T>
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kAdam;
  LrSchedule schedule;
  double lr = schedule.initial;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;

  static OptimizerState make(OptimizerKind kind, LrSchedule schedule) {
    OptimizerState s;
    s.kind = kind;
    s.schedule = std::move(schedule);
    s.lr = s.schedule.initial;
    return s;
  }

  void set_epoch(int epoch) { lr = schedule.at_epoch(epoch); }
};

/// Applies one update to every parameter and zeroes its gradient. The
/// parameter list must be passed in the same order on every call.
template <std::floating_point T>
void optimizer_step(std::span<Tensor<T>> params, OptimizerState<T>& state) {
  for (const auto& p : params) {
    if (!p.has_grad()) throw ContractError("optimizer_step: parameter without gradient");
  }
  ++state.step;
  if (state.kind == OptimizerKind::kAdam) {
    if (state.first_moment.empty()) {
      for (const auto& p : params) {
        state.first_moment.emplace_back(p.numel(), T(0));
        state.second_moment.emplace_back(p.numel(), T(0));
      }
    }
    if (state.first_moment.size() != params.size()) {
      throw ContractError("optimizer_step: parameter list changed between steps");
    }
  }
  const double bias1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto value = params[k].data();
    auto grad = params[k].grad();
    if (state.kind == OptimizerKind::kSgd) {
      for (std::size_t i = 0; i < value.size(); ++i)
        value[i] -= static_cast<T>(state.lr) * grad[i];
    } else {
      auto& m = state.first_moment[k];
      auto& v = state.second_moment[k];
      if (m.size() != value.size()) {
        throw DimensionError("optimizer_step: Adam moments do not match parameter " +
                             std::to_string(k));
      }
      const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
      for (std::size_t i = 0; i < value.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
        v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
        const double mhat = m[i] / bias1;
        const double vhat = v[i] / bias2;
        value[i] -= static_cast<T>(state.lr * mhat / (std::sqrt(vhat) + state.eps));
      }
    }
    params[k].zero_grad();
  }
}

}  // namespace ksm
