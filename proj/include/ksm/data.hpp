// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ksm/errors.hpp"
#include "ksm/tensor.hpp"

namespace ksm {

/// uint8 images (C x H x W per record) with integer labels and the
/// per-channel constants used to normalize them at batch time.
struct Dataset {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<std::uint8_t> images;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::vector<float> mean;
  std::vector<float> stddev;

  std::size_t image_bytes() const { return channels * height * width; }
  std::size_t size() const { return labels.size(); }
  std::size_t class_count() const { return class_names.size(); }

  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(images).subspan(i * image_bytes(), image_bytes());
  }

  void validate() const {
    if (images.size() != size() * image_bytes()) throw InvariantError("dataset: image bytes != records * C*H*W");
    for (int l : labels)
      if (l < 0 || static_cast<std::size_t>(l) >= class_count())
        throw InvariantError("dataset: label out of range");
    if (mean.size() != channels || stddev.size() != channels)
      throw InvariantError("dataset: normalization constants do not match channels");
  }
};

struct DatasetSplits {
  Dataset train;
  Dataset test;
};

enum class CifarVariant { k10 = 10, k100 = 100 };

inline std::size_t cifar_record_bytes(CifarVariant v) {
  return (v == CifarVariant::k10 ? 1 : 2) + 3072;
}

namespace detail {

inline std::vector<std::string> cifar10_names() {
  return {"airplane", "automobile", "bird", "cat", "deer",
          "dog",      "frog",       "horse", "ship", "truck"};
}

inline Dataset cifar_template(CifarVariant v) {
  Dataset ds;
  if (v == CifarVariant::k10) {
    ds.class_names = cifar10_names();
    ds.mean = {0.4914f, 0.4822f, 0.4465f};
    ds.stddev = {0.2470f, 0.2435f, 0.2616f};
  } else {
    for (int i = 0; i < 100; ++i) ds.class_names.push_back("fine_" + std::to_string(i));
    ds.mean = {0.5071f, 0.4865f, 0.4409f};
    ds.stddev = {0.2673f, 0.2564f, 0.2762f};
  }
  return ds;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataMissingError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace detail

/// Parses CIFAR binary records. CIFAR-10: 1 label byte + 3072 pixel bytes;
/// CIFAR-100: coarse + fine label bytes + 3072 pixel bytes (fine label kept).
inline Dataset parse_cifar(std::span<const std::uint8_t> bytes, CifarVariant variant) {
  const std::size_t record = cifar_record_bytes(variant);
  if (bytes.size() % record != 0) {
    throw FormatError(FormatErrorKind::kBadRecordSize,
                      "CIFAR file of " + std::to_string(bytes.size()) +
                          " bytes is not a multiple of " + std::to_string(record));
  }
  Dataset ds = detail::cifar_template(variant);
  const std::size_t n = bytes.size() / record;
  const std::size_t label_bytes = record - 3072;
  ds.labels.reserve(n);
  ds.images.reserve(n * 3072);
  for (std::size_t r = 0; r < n; ++r) {
    const auto rec = bytes.subspan(r * record, record);
    const int label = rec[label_bytes - 1];
    if (static_cast<std::size_t>(label) >= ds.class_count()) {
      throw FormatError(FormatErrorKind::kMalformed, "CIFAR label " + std::to_string(label) +
                                                         " in record " + std::to_string(r));
    }
    ds.labels.push_back(label);
    ds.images.insert(ds.images.end(), rec.begin() + label_bytes, rec.end());
  }
  return ds;
}

inline Dataset load_cifar_file(const std::filesystem::path& path, CifarVariant variant) {
  const auto bytes = detail::read_file(path);
  return parse_cifar(bytes, variant);
}

/// Loads train and test splits from a CIFAR binary directory. Accepts the
/// directory itself or its parent (cifar-10-batches-bin / cifar-100-binary).
inline DatasetSplits load_cifar(const std::filesystem::path& dir, CifarVariant variant) {
  namespace fs = std::filesystem;
  const bool ten = variant == CifarVariant::k10;
  std::vector<fs::path> candidates{dir, dir / (ten ? "cifar-10-batches-bin" : "cifar-100-binary")};
  for (const auto& root : candidates) {
    const fs::path test = root / (ten ? "test_batch.bin" : "test.bin");
    if (!fs::exists(test)) continue;
    DatasetSplits s{detail::cifar_template(variant), load_cifar_file(test, variant)};
    std::vector<fs::path> train_files;
    if (ten) {
      for (int i = 1; i <= 5; ++i) train_files.push_back(root / ("data_batch_" + std::to_string(i) + ".bin"));
    } else {
      train_files.push_back(root / "train.bin");
    }
    for (const auto& f : train_files) {
      Dataset part = load_cifar_file(f, variant);
      s.train.images.insert(s.train.images.end(), part.images.begin(), part.images.end());
      s.train.labels.insert(s.train.labels.end(), part.labels.begin(), part.labels.end());
    }
    if (!ten) {
      std::ifstream names(root / "fine_label_names.txt");
      std::vector<std::string> loaded;
      for (std::string line; std::getline(names, line);)
        if (!line.empty()) loaded.push_back(line);
      if (loaded.size() == 100) s.train.class_names = s.test.class_names = loaded;
    }
    return s;
  }
  throw DataMissingError("no CIFAR-" + std::to_string(static_cast<int>(variant)) +
                         " binary files under " + dir.string());
}

/// Images of one task with labels remapped to 0..classes-1.
struct TaskData {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> images;
  std::vector<int> labels;
  std::vector<float> mean;
  std::vector<float> stddev;

  std::size_t image_bytes() const { return channels * height * width; }
  std::size_t size() const { return labels.size(); }
};

struct TaskDescriptor {
  std::uint32_t id = 0;
  std::vector<int> classes;  // global class ids; local label = position
  TaskData train;
  TaskData test;
};

using TaskSequence = std::vector<TaskDescriptor>;

/// Normalized float batch [n, C, H, W] for the given record indices.
template <std::floating_point T>
Tensor<T> make_batch(const TaskData& data, std::span<const std::size_t> indices) {
  const std::size_t per = data.image_bytes();
  const std::size_t plane = data.height * data.width;
  std::vector<T> values(indices.size() * per);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const std::uint8_t* src = data.images.data() + indices[b] * per;
    for (std::size_t c = 0; c < data.channels; ++c) {
      const T m = static_cast<T>(data.mean[c]), s = static_cast<T>(data.stddev[c]);
      for (std::size_t i = 0; i < plane; ++i) {
        values[b * per + c * plane + i] = (static_cast<T>(src[c * plane + i]) / T(255) - m) / s;
      }
    }
  }
  return Tensor<T>(Shape{indices.size(), data.channels, data.height, data.width}, std::move(values));
}

inline std::vector<int> batch_labels(const TaskData& data, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(data.labels[i]);
  return out;
}

namespace detail {

inline TaskData filter_classes(const Dataset& ds, const std::vector<int>& classes) {
  TaskData td{ds.channels, ds.height, ds.width, {}, {}, ds.mean, ds.stddev};
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto it = std::find(classes.begin(), classes.end(), ds.labels[i]);
    if (it == classes.end()) continue;
    const auto img = ds.image(i);
    td.images.insert(td.images.end(), img.begin(), img.end());
    td.labels.push_back(static_cast<int>(it - classes.begin()));
  }
  return td;
}

}  // namespace detail

/// Disjoint class partition by a seeded shuffle of class ids; each task
/// keeps the records of its classes from both source splits.
inline TaskSequence split_tasks(const DatasetSplits& ds, std::size_t n_tasks,
                                std::size_t classes_per_task, std::uint64_t seed) {
  const std::size_t classes = ds.train.class_count();
  if (n_tasks == 0 || classes_per_task == 0) throw ContractError("split_tasks: empty split requested");
  if (n_tasks * classes_per_task > classes) {
    throw ContractError("split_tasks: " + std::to_string(n_tasks) + " x " +
                        std::to_string(classes_per_task) + " classes requested, dataset has " +
                        std::to_string(classes));
  }
  std::vector<int> order(classes);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  TaskSequence seq;
  for (std::size_t t = 0; t < n_tasks; ++t) {
    TaskDescriptor task;
    task.id = static_cast<std::uint32_t>(t + 1);
    task.classes.assign(order.begin() + t * classes_per_task,
                        order.begin() + (t + 1) * classes_per_task);
    task.train = detail::filter_classes(ds.train, task.classes);
    task.test = detail::filter_classes(ds.test, task.classes);
    seq.push_back(std::move(task));
  }
  return seq;
}

/// Gaussian-blob image classes. Each class owns a smooth prototype; a sample
/// is 128 + 64 * (separation * prototype + noise * N(0, 1)), clipped to uint8.
struct SyntheticSpec {
  std::size_t n_tasks = 5;
  std::size_t classes_per_task = 2;
  std::size_t channels = 3;
  std::size_t side = 8;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  double separation = 1.0;
  double noise = 0.5;
  std::size_t blobs = 3;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<double> blob_prototype(const SyntheticSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(0.0, double(spec.side));
  std::uniform_real_distribution<double> width(0.8, 0.35 * double(spec.side) + 0.8);
  std::uniform_real_distribution<double> amp(-1.0, 1.0);
  const std::size_t plane = spec.side * spec.side;
  std::vector<double> proto(spec.channels * plane, 0.0);
  for (std::size_t b = 0; b < spec.blobs; ++b) {
    const double cy = pos(rng), cx = pos(rng), w = width(rng);
    std::vector<double> a(spec.channels);
    for (auto& v : a) v = amp(rng);
    for (std::size_t y = 0; y < spec.side; ++y)
      for (std::size_t x = 0; x < spec.side; ++x) {
        const double dy = double(y) + 0.5 - cy, dx = double(x) + 0.5 - cx;
        const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * w * w));
        for (std::size_t c = 0; c < spec.channels; ++c) proto[c * plane + y * spec.side + x] += a[c] * g;
      }
  }
  double peak = 0.0;
  for (double v : proto) peak = std::max(peak, std::abs(v));
  if (peak > 0.0)
    for (auto& v : proto) v /= peak;
  return proto;
}

inline void synth_samples(const SyntheticSpec& spec, const std::vector<double>& proto, int label,
                          std::size_t count, std::mt19937_64& rng, TaskData& out) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t n = 0; n < count; ++n) {
    for (double p : proto) {
      const double v = 128.0 + 64.0 * (spec.separation * p + spec.noise * gauss(rng));
      out.images.push_back(static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0)));
    }
    out.labels.push_back(label);
  }
}

}  // namespace detail

/// Synthetic task sequence with disjoint global class ids; deterministic in seed.
inline TaskSequence synthetic_tasks(const SyntheticSpec& spec) {
  if (spec.n_tasks == 0 || spec.classes_per_task == 0 || spec.side == 0 || spec.channels == 0) {
    throw ContractError("synthetic_tasks: empty configuration");
  }
  std::mt19937_64 rng(spec.seed);
  TaskSequence seq;
  int next_class = 0;
  for (std::size_t t = 0; t < spec.n_tasks; ++t) {
    TaskDescriptor task;
    task.id = static_cast<std::uint32_t>(t + 1);
    const TaskData empty{spec.channels, spec.side, spec.side, {}, {},
                         std::vector<float>(spec.channels, 0.5f),
                         std::vector<float>(spec.channels, 0.25f)};
    task.train = empty;
    task.test = empty;
    std::vector<std::vector<double>> protos;
    for (std::size_t c = 0; c < spec.classes_per_task; ++c) {
      task.classes.push_back(next_class++);
      protos.push_back(detail::blob_prototype(spec, rng));
    }
    for (std::size_t c = 0; c < spec.classes_per_task; ++c) {
      detail::synth_samples(spec, protos[c], int(c), spec.train_per_class, rng, task.train);
      detail::synth_samples(spec, protos[c], int(c), spec.test_per_class, rng, task.test);
    }
    seq.push_back(std::move(task));
  }
  return seq;
}

}  // namespace ksm
