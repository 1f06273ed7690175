// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ksm/data.hpp"
#include "ksm/io.hpp"
#include "ksm/report.hpp"
#include "ksm/trainer.hpp"

namespace ksm {

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitData = 3, kExitProvenance = 4 };

struct DatasetOptions {
  std::string dataset = "synthetic";  // synthetic | cifar10 | cifar100
  std::size_t tasks = 5;
  std::size_t classes_per_task = 2;
  std::uint64_t seed = 0;
  std::string data_dir;  // falls back to $KSM_DATA_DIR
  std::size_t side = 8;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  double separation = 1.0;
  double noise = 0.5;
};

struct RunOptions {
  DatasetOptions data;
  std::string strategy = "ksm";
  std::string backbone = "auto";  // auto | tiny | desk | vgg16
  int epochs = 10;
  int initial_epochs = -1;
  std::size_t batch = 64;
  double lr = 1e-4;
  double initial_lr = 1e-3;
  std::optional<std::uint32_t> init_task;
  MaskHyperparams hp;
  std::string out = "ksm-out";
};

inline nlohmann::json to_json(const DatasetOptions& d) {
  return {{"dataset", d.dataset},
          {"tasks", d.tasks},
          {"classes_per_task", d.classes_per_task},
          {"seed", d.seed},
          {"side", d.side},
          {"train_per_class", d.train_per_class},
          {"test_per_class", d.test_per_class},
          {"separation", d.separation},
          {"noise", d.noise}};
}

inline DatasetOptions dataset_options_from_json(const nlohmann::json& j) {
  DatasetOptions d;
  d.dataset = j.value("dataset", d.dataset);
  d.tasks = j.value("tasks", d.tasks);
  d.classes_per_task = j.value("classes_per_task", d.classes_per_task);
  d.seed = j.value("seed", d.seed);
  d.side = j.value("side", d.side);
  d.train_per_class = j.value("train_per_class", d.train_per_class);
  d.test_per_class = j.value("test_per_class", d.test_per_class);
  d.separation = j.value("separation", d.separation);
  d.noise = j.value("noise", d.noise);
  return d;
}

inline nlohmann::json to_json(const RunOptions& o) {
  nlohmann::json j = {{"schema", "ksm.run/1"},
                      {"data", to_json(o.data)},
                      {"strategy", o.strategy},
                      {"backbone", o.backbone},
                      {"epochs", o.epochs},
                      {"initial_epochs", o.initial_epochs},
                      {"batch", o.batch},
                      {"lr", o.lr},
                      {"initial_lr", o.initial_lr},
                      {"k", o.hp.k},
                      {"tau", o.hp.tau},
                      {"temperature", o.hp.temperature},
                      {"init_value", o.hp.init_value}};
  j["init_task"] = o.init_task ? nlohmann::json(*o.init_task) : nlohmann::json(nullptr);
  return j;
}

inline std::filesystem::path resolve_data_dir(const DatasetOptions& d) {
  if (!d.data_dir.empty()) return d.data_dir;
  if (const char* env = std::getenv("KSM_DATA_DIR")) return env;
  throw DataMissingError("no data directory: pass --data-dir or set KSM_DATA_DIR");
}

inline bool is_cifar(const DatasetOptions& d) { return d.dataset == "cifar10" || d.dataset == "cifar100"; }

inline void validate(const DatasetOptions& d) {
  if (d.dataset != "synthetic" && !is_cifar(d)) throw ContractError("unknown dataset '" + d.dataset + "'");
  if (d.tasks == 0 || d.classes_per_task == 0) throw ContractError("--tasks and --classes-per-task must be >= 1");
  const std::size_t available = d.dataset == "cifar10" ? 10 : d.dataset == "cifar100" ? 100 : SIZE_MAX;
  if (d.tasks * d.classes_per_task > available) {
    throw ContractError(std::to_string(d.tasks) + " tasks x " + std::to_string(d.classes_per_task) +
                        " classes exceed the " + d.dataset + " class count");
  }
}

inline TaskSequence load_tasks(const DatasetOptions& d) {
  validate(d);
  if (d.dataset == "synthetic") {
    SyntheticSpec spec;
    spec.n_tasks = d.tasks;
    spec.classes_per_task = d.classes_per_task;
    spec.side = d.side;
    spec.train_per_class = d.train_per_class;
    spec.test_per_class = d.test_per_class;
    spec.separation = d.separation;
    spec.noise = d.noise;
    spec.seed = d.seed;
    return synthetic_tasks(spec);
  }
  const auto variant = d.dataset == "cifar10" ? CifarVariant::k10 : CifarVariant::k100;
  return split_tasks(load_cifar(resolve_data_dir(d), variant), d.tasks, d.classes_per_task, d.seed);
}

inline BackboneConfig backbone_for(const RunOptions& o, const TaskSequence& tasks) {
  const auto& td = tasks.front().train;
  std::string name = o.backbone;
  if (name == "auto") name = is_cifar(o.data) ? "desk" : "tiny";
  if (name == "tiny") return BackboneConfig::tiny(td.channels, td.height);
  if (name == "desk") return BackboneConfig::desk_default();
  if (name == "vgg16") return BackboneConfig::vgg16_bn_cifar();
  throw ContractError("unknown backbone '" + o.backbone + "'");
}

inline TrainConfig train_config_for(const RunOptions& o) {
  TrainConfig cfg;
  cfg.epochs = o.epochs;
  cfg.initial_epochs = o.initial_epochs;
  cfg.batch_size = o.batch;
  cfg.lr = o.lr;
  cfg.initial_lr = o.initial_lr;
  cfg.seed = o.data.seed;
  cfg.strategy = strategy_from_name(o.strategy);
  cfg.hp = o.hp;
  cfg.initial_task = o.init_task;
  return cfg;
}

inline std::string task_file_name(std::uint32_t id) { return "task_" + std::to_string(id) + ".ksm"; }

/// Runs a task sequence and writes ledger.csv, ledger.json, run.json,
/// backbone.ksmc and one task_<id>.ksm per task into `o.out`.
inline int cmd_run(const RunOptions& o, std::ostream& out, std::ostream& err) {
  TrainConfig cfg;
  try {
    validate(o.data);
    if (o.epochs < 0 || o.batch == 0) throw ContractError("--epochs must be >= 0 and --batch >= 1");
    cfg = train_config_for(o);
    cfg.hp.validate();
    if (o.init_task && (*o.init_task < 1 || *o.init_task > o.data.tasks)) {
      throw ContractError("--init-task must be within 1.." + std::to_string(o.data.tasks));
    }
  } catch (const ContractError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  TaskSequence tasks;
  try {
    tasks = load_tasks(o.data);
  } catch (const DataMissingError& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }

  namespace fs = std::filesystem;
  const BackboneConfig backbone = backbone_for(o, tasks);
  ContinualTrainer<float> trainer(backbone, cfg);
  const RunLedger ledger = trainer.run_sequence(tasks);

  const fs::path dir = o.out;
  fs::create_directories(dir);
  const auto csv = ledger_csv(ledger);
  write_file_atomic(dir / "ledger.csv", std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
  const auto json = ledger_json(ledger).dump(2) + "\n";
  write_file_atomic(dir / "ledger.json", std::span(reinterpret_cast<const std::uint8_t*>(json.data()), json.size()));
  const auto run = to_json(o).dump(2) + "\n";
  write_file_atomic(dir / "run.json", std::span(reinterpret_cast<const std::uint8_t*>(run.data()), run.size()));
  save_checkpoint(dir / "backbone.ksmc", trainer.model().backbone());
  for (auto id : ledger.task_order) {
    save_mask(dir / task_file_name(id), artifact_to_file(trainer.model().task(id), trainer.model().backbone()));
  }

  out << csv;
  out << "mean accuracy " << format_double(ledger.mean_final_accuracy(), 4)
      << (ledger.no_forgetting() ? "  (no forgetting)" : "  (forgetting observed)") << '\n';
  return kExitOk;
}

struct StatsOptions {
  std::vector<std::string> files;
  std::optional<std::uint32_t> kernel;  // overrides stored kernel geometry
  std::string csv_path;
  bool json = false;
};

/// Per-layer ones/scale ratios and storage overhead for each mask file.
inline int cmd_stats(const StatsOptions& o, std::ostream& out, std::ostream& err) {
  if (o.files.empty()) {
    err << "error: no mask files given\n";
    return kExitUsage;
  }
  nlohmann::json report = {{"schema", kStatsSchema}, {"files", nlohmann::json::array()}};
  std::vector<LayerMaskStats> all;
  for (const auto& path : o.files) {
    MaskFile file;
    try {
      file = load_mask(path);
    } catch (const DataMissingError& e) {
      err << "error: " << e.what() << '\n';
      return kExitData;
    } catch (const FormatError& e) {
      err << "error: " << path << ": " << e.what() << '\n';
      return kExitData;
    }
    std::vector<KernelGeometry> kernels;
    bool element_wise = false;
    if (file.task && !o.kernel) {
      kernels = file.task->kernels;
      const auto name = file.task->strategy;
      element_wise = !name.ends_with("+initial") && name != "finetune" &&
                     strategy_from_name(name).granularity == Granularity::kElementWise;
    } else {
      const std::uint32_t k = o.kernel.value_or(3);
      kernels.assign(file.layers.size(), KernelGeometry{k, k});
    }
    const auto ov = overhead(file.layers, kernels, element_wise);
    nlohmann::json layers = nlohmann::json::array();
    out << path << '\n';
    out << "  layer   entries   ones_ratio  scale_ratio  mean_scale\n";
    for (const auto& l : file.layers) {
      const auto s = layer_stats(l);
      all.push_back(s);
      out << "  " << std::setw(5) << s.layer_id << std::setw(10) << s.entries << "   "
          << format_double(s.ones_ratio) << "     " << format_double(s.scale_ratio) << "     "
          << format_double(s.mean_scale) << '\n';
      layers.push_back({{"layer", s.layer_id},
                        {"entries", s.entries},
                        {"ones", s.ones},
                        {"ones_ratio", s.ones_ratio},
                        {"scale_ratio", s.scale_ratio},
                        {"mean_scale", s.mean_scale}});
    }
    out << "  mask bits " << ov.mask_bits << ", element-wise bits " << ov.element_wise_bits << " ("
        << format_double(ov.reduction, 2) << "x), stored scales " << ov.stored_scales << '\n';
    out << "  mask bytes " << ov.mask_bytes << ", binary-only bytes " << ov.binary_bytes
        << ", element-wise binary bytes " << ov.element_wise_binary_bytes << '\n';
    report["files"].push_back({{"path", path}, {"layers", layers}, {"overhead", overhead_json(ov)}});
  }
  if (!o.csv_path.empty()) {
    const auto csv = stats_csv(all);
    write_file_atomic(o.csv_path, std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
  }
  if (o.json) out << report.dump(2) << '\n';
  return kExitOk;
}

struct EvalOptions {
  std::string checkpoint;
  std::string mask;
  std::string run_config;  // run.json written by cmd_run; supplies dataset options
  DatasetOptions data;
};

struct EvalOutcome {
  int code = kExitOk;
  std::uint32_t task_id = 0;
  EvalResult result;
};

inline EvalOutcome eval_artifact(const EvalOptions& o, std::ostream& err) {
  EvalOutcome outcome;
  MaskFile file;
  Backbone<float> backbone;
  DatasetOptions data = o.data;
  try {
    if (!o.run_config.empty()) {
      std::ifstream in(o.run_config);
      if (!in) throw DataMissingError("cannot open " + o.run_config);
      data = dataset_options_from_json(nlohmann::json::parse(in).at("data"));
      data.data_dir = o.data.data_dir;
    }
    backbone = load_checkpoint<float>(o.checkpoint);
    file = load_mask(o.mask);
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    outcome.code = e.kind() == FormatErrorKind::kHashMismatch ? kExitProvenance : kExitData;
    return outcome;
  } catch (const DataMissingError& e) {
    err << "error: " << e.what() << '\n';
    outcome.code = kExitData;
    return outcome;
  } catch (const nlohmann::json::exception& e) {
    err << "error: run config: " << e.what() << '\n';
    outcome.code = kExitData;
    return outcome;
  }
  if (!file.task) {
    err << "error: mask file carries no task section\n";
    outcome.code = kExitData;
    return outcome;
  }
  if (file.task->backbone_hash != backbone.content_hash()) {
    err << "error: mask was trained against a different backbone (hash mismatch)\n";
    outcome.code = kExitProvenance;
    return outcome;
  }

  TaskSequence tasks;
  try {
    tasks = load_tasks(data);
  } catch (const ContractError& e) {
    err << "error: " << e.what() << '\n';
    outcome.code = kExitUsage;
    return outcome;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    outcome.code = kExitData;
    return outcome;
  }
  const TaskDescriptor* task = nullptr;
  for (const auto& t : tasks)
    if (t.id == file.task->task_id) task = &t;
  if (!task || task->classes != file.task->classes) {
    err << "error: task " << file.task->task_id << " not reproducible from the given dataset options\n";
    outcome.code = kExitData;
    return outcome;
  }

  MaskedModel<float> model(std::move(backbone));
  try {
    model.add_task(artifact_from_file<float>(file, model));
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    outcome.code = kExitData;
    return outcome;
  }
  TrainConfig cfg;
  cfg.seed = data.seed;
  // evaluation goes through the trainer's eval path with no training
  ContinualTrainer<float> evaluator(model.backbone().config, cfg);
  evaluator.model() = std::move(model);
  outcome.task_id = file.task->task_id;
  outcome.result = evaluator.evaluate(outcome.task_id, task->test);
  return outcome;
}

/// Prints the accuracy of one saved task artifact.
inline int cmd_eval(const EvalOptions& o, std::ostream& out, std::ostream& err) {
  const auto outcome = eval_artifact(o, err);
  if (outcome.code != kExitOk) return outcome.code;
  out << "task " << outcome.task_id << " accuracy " << format_double(outcome.result.accuracy, 4) << " loss "
      << format_double(outcome.result.loss, 6) << '\n';
  return kExitOk;
}

}  // namespace ksm
