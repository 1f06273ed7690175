// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <ctime>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ksm/data.hpp"
#include "ksm/model.hpp"
#include "ksm/ops.hpp"
#include "ksm/optim.hpp"
#include "ksm/strategy.hpp"

namespace ksm {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct TrainConfig {
  int epochs = 10;
  int initial_epochs = -1;  // negative: same as `epochs`
  std::size_t batch_size = 64;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double lr = 1e-4;          // mask tasks
  double initial_lr = 1e-3;  // training the backbone from scratch
  std::vector<int> milestones;  // empty: one decay half-way through
  double decay = 0.1;
  std::uint64_t seed = 0;
  StrategySpec strategy = strategy_from_name("ksm");
  MaskHyperparams hp;
  std::optional<std::uint32_t> initial_task;  // task id trained first; default: first in sequence

  int epochs_for(bool initial) const { return initial && initial_epochs >= 0 ? initial_epochs : epochs; }

  LrSchedule schedule(bool initial) const {
    const int e = epochs_for(initial);
    LrSchedule s{initial ? initial_lr : lr, milestones, decay};
    if (s.milestones.empty() && e >= 2) s.milestones = {e / 2};
    return s;
  }
};

struct EvalResult {
  double accuracy = 0.0;  // percent
  double loss = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
};

/// Accuracy matrix and timing of one task sequence. Index i is training
/// position; accuracy[i][j] is task i's accuracy after finishing position j
/// (empty for j < i).
struct RunLedger {
  std::string strategy;
  std::uint64_t seed = 0;
  std::vector<std::uint32_t> task_order;
  std::vector<double> final_accuracy;
  std::vector<double> seconds;
  std::vector<int> epochs;
  std::vector<std::vector<std::optional<double>>> accuracy;

  /// True iff every row is constant from its diagonal on (bit-exact).
  bool no_forgetting() const {
    for (std::size_t i = 0; i < accuracy.size(); ++i)
      for (std::size_t j = i; j < accuracy[i].size(); ++j)
        if (!accuracy[i][j] || *accuracy[i][j] != *accuracy[i][i]) return false;
    return true;
  }

  double mean_final_accuracy() const {
    if (final_accuracy.empty()) return 0.0;
    return std::accumulate(final_accuracy.begin(), final_accuracy.end(), 0.0) /
           double(final_accuracy.size());
  }
};

inline double process_seconds() { return double(std::clock()) / double(CLOCKS_PER_SEC); }

/// Trains an initial task from scratch, freezes the backbone, then learns
/// one artifact per later task with the configured strategy.
template <std::floating_point T>
class ContinualTrainer {
 public:
  /// Called after every backward pass, before the optimizer step.
  using StepObserver = std::function<void(const TaskArtifact<T>&, const MaskedModel<T>&)>;

  ContinualTrainer(const BackboneConfig& backbone, TrainConfig config)
      : config_(std::move(config)),
        model_(Backbone<T>::init(backbone, mix_seed(config_.seed, 1))) {
    config_.hp.validate();
    make_strategy(config_.strategy);
  }

  MaskedModel<T>& model() { return model_; }
  const MaskedModel<T>& model() const { return model_; }
  const TrainConfig& config() const { return config_; }
  void set_step_observer(StepObserver observer) { observer_ = std::move(observer); }
  double last_train_seconds() const { return last_seconds_; }
  std::optional<std::uint32_t> initial_task_id() const { return initial_id_; }

  TaskArtifact<T>& train_initial(const TaskDescriptor& task) {
    if (initial_id_) throw ContractError("initial task already trained");
    TaskArtifact<T> a = model_.make_initial_artifact(task.id, task.classes.size(), config_.strategy,
                                                     config_.hp, mix_seed(config_.seed, 100 + task.id));
    a.classes = task.classes;
    auto& artifact = model_.add_task(std::move(a));
    fit(artifact, task.train, /*initial=*/true);
    model_.backbone().freeze();
    model_.finalize(artifact);
    initial_id_ = task.id;
    initial_seconds_ = last_seconds_;
    frozen_hash_ = model_.backbone().content_hash();
    return artifact;
  }

  /// Copy of this trainer that continues with another mask strategy. Only
  /// valid right after the initial task; the frozen backbone and the initial
  /// artifact are shared read-only.
  ContinualTrainer fork(const StrategySpec& strategy) const {
    if (!initial_id_ || model_.task_ids().size() != 1) {
      throw ContractError("fork requires exactly the initial task to be trained");
    }
    if (strategy.finetune) throw ContractError("fork: fine-tuning mutates the backbone, train it separately");
    make_strategy(strategy);
    ContinualTrainer copy = *this;
    copy.config_.strategy = strategy;
    copy.observer_ = nullptr;
    return copy;
  }

  TaskArtifact<T>& train_task(const TaskDescriptor& task) {
    if (!initial_id_) throw ContractError("train_task before the initial task");
    if (!model_.backbone().frozen) throw ContractError("train_task requires a frozen backbone");
    if (model_.has_task(task.id)) throw ContractError("task " + std::to_string(task.id) + " already trained");
    const bool finetune = config_.strategy.finetune;
    if (finetune) {
      // fine-tuning keeps adapting one unfrozen copy of the backbone
      model_.backbone() = model_.backbone().clone();
      model_.backbone().unfreeze();
    }
    TaskArtifact<T> a =
        model_.make_task_artifact(task.id, task.classes.size(), config_.strategy, config_.hp,
                                  model_.task(*initial_id_), mix_seed(config_.seed, 100 + task.id));
    a.classes = task.classes;
    auto& artifact = model_.add_task(std::move(a));
    fit(artifact, task.train, /*initial=*/false);
    if (finetune) {
      model_.backbone().freeze();
    } else if (model_.backbone().content_hash() != frozen_hash_) {
      throw InvariantError("backbone weights changed while training task " + std::to_string(task.id));
    }
    model_.finalize(artifact);
    return artifact;
  }

  /// Eval-mode accuracy (percent) and mean loss on `data`.
  EvalResult evaluate(std::uint32_t id, const TaskData& data, std::size_t batch = 256) {
    auto& a = model_.task(id);
    EvalResult r;
    double loss_sum = 0.0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += batch) {
      idx.resize(std::min(batch, data.size() - start));
      std::iota(idx.begin(), idx.end(), start);
      const auto labels = batch_labels(data, idx);
      const Tensor<T> logits = model_.forward(make_batch<T>(data, idx), a, Mode::kEval);
      loss_sum += double(softmax_cross_entropy(logits, labels).item()) * double(idx.size());
      const std::size_t classes = logits.dim(1);
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const T* row = logits.data().data() + b * classes;
        const auto pred = std::max_element(row, row + classes) - row;
        r.correct += (pred == labels[b]) ? 1 : 0;
      }
      r.total += idx.size();
    }
    if (r.total > 0) {
      r.accuracy = 100.0 * double(r.correct) / double(r.total);
      r.loss = loss_sum / double(r.total);
    }
    return r;
  }

  /// Trains the initial task (unless already trained) and then every other
  /// task in order, evaluating all finished tasks after each step.
  RunLedger run_sequence(const TaskSequence& tasks) {
    if (tasks.empty()) throw ContractError("run_sequence: no tasks");
    std::vector<const TaskDescriptor*> order;
    const std::uint32_t first = config_.initial_task.value_or(tasks.front().id);
    for (const auto& t : tasks)
      if (t.id == first) order.push_back(&t);
    if (order.empty()) throw UnknownTaskError("initial task " + std::to_string(first) + " not in sequence");
    for (const auto& t : tasks)
      if (t.id != first) order.push_back(&t);

    RunLedger ledger;
    ledger.strategy = strategy_name(config_.strategy);
    ledger.seed = config_.seed;
    const std::size_t n = order.size();
    ledger.accuracy.assign(n, std::vector<std::optional<double>>(n));
    for (std::size_t j = 0; j < n; ++j) {
      const auto& task = *order[j];
      if (j == 0) {
        if (!initial_id_) {
          train_initial(task);
        } else if (*initial_id_ != task.id) {
          throw ContractError("run_sequence: trainer was initialized on task " + std::to_string(*initial_id_));
        }
      } else {
        train_task(task);
      }
      ledger.task_order.push_back(task.id);
      ledger.seconds.push_back(j == 0 ? initial_seconds_ : last_seconds_);
      ledger.epochs.push_back(config_.epochs_for(j == 0));
      for (std::size_t i = 0; i <= j; ++i) ledger.accuracy[i][j] = evaluate(order[i]->id, order[i]->test).accuracy;
      ledger.final_accuracy.push_back(*ledger.accuracy[j][j]);
    }
    return ledger;
  }

 private:
  void fit(TaskArtifact<T>& artifact, const TaskData& data, bool initial) {
    const int epochs = config_.epochs_for(initial);
    auto params = model_.trainable_parameters(artifact.task_id);
    auto opt = OptimizerState<T>::make(config_.optimizer, config_.schedule(initial));
    std::mt19937_64 shuffle_rng(mix_seed(config_.seed, 200 + artifact.task_id));
    std::mt19937_64 noise_rng(mix_seed(config_.seed, 300 + artifact.task_id));
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t batch = std::max<std::size_t>(config_.batch_size, 1);

    const double start = process_seconds();
    for (int epoch = 0; epoch < epochs; ++epoch) {
      opt.set_epoch(epoch);
      std::shuffle(idx.begin(), idx.end(), shuffle_rng);
      for (std::size_t s = 0; s < idx.size(); s += batch) {
        const std::span<const std::size_t> slice(idx.data() + s, std::min(batch, idx.size() - s));
        const Tensor<T> x = make_batch<T>(data, slice);
        const auto labels = batch_labels(data, slice);
        const Tensor<T> logits = model_.forward(x, artifact, Mode::kTrain, &noise_rng);
        backward(softmax_cross_entropy(logits, labels));
        if (observer_) observer_(artifact, model_);
        optimizer_step<T>(params, opt);
      }
    }
    last_seconds_ = process_seconds() - start;
  }

  TrainConfig config_;
  MaskedModel<T> model_;
  std::optional<std::uint32_t> initial_id_;
  std::uint64_t frozen_hash_ = 0;
  double last_seconds_ = 0.0;
  double initial_seconds_ = 0.0;
  StepObserver observer_;
};

}  // namespace ksm
