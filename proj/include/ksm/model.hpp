// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <random>
#include <variant>
#include <vector>

#include "ksm/mask.hpp"
#include "ksm/ops.hpp"
#include "ksm/strategy.hpp"

namespace ksm {

struct ConvLayer {
  std::size_t out_channels = 0;
  std::size_t in_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
  bool norm = true;
  bool relu = true;

  Shape weight_shape() const { return {out_channels, in_channels, kernel, kernel}; }
  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

struct PoolLayer {
  std::size_t size = 2;
  friend bool operator==(const PoolLayer&, const PoolLayer&) = default;
};

/// Frozen, unmasked fully connected feature layer.
struct DenseLayer {
  std::size_t out_features = 0;
  std::size_t in_features = 0;
  bool relu = true;
  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

using LayerSpec = std::variant<ConvLayer, PoolLayer, DenseLayer>;

struct BackboneConfig {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<LayerSpec> layers;

  /// Walks the layer list and returns the flattened feature dimension.
  /// Throws DimensionError when consecutive layers do not compose.
  std::size_t feature_dim() const {
    std::size_t c = channels, h = height, w = width, flat = 0;
    bool spatial = true;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto where = " (layer " + std::to_string(i) + ")";
      if (const auto* conv = std::get_if<ConvLayer>(&layers[i])) {
        if (!spatial) throw DimensionError("conv after dense" + where);
        if (conv->in_channels != c) throw DimensionError("conv input channels" + where);
        if (conv->kernel == 0 || conv->stride == 0) throw DimensionError("conv geometry" + where);
        if (h + 2 * conv->pad < conv->kernel || w + 2 * conv->pad < conv->kernel)
          throw DimensionError("conv kernel exceeds input" + where);
        h = (h + 2 * conv->pad - conv->kernel) / conv->stride + 1;
        w = (w + 2 * conv->pad - conv->kernel) / conv->stride + 1;
        c = conv->out_channels;
      } else if (const auto* pool = std::get_if<PoolLayer>(&layers[i])) {
        if (!spatial || pool->size == 0 || h < pool->size || w < pool->size)
          throw DimensionError("pool does not fit" + where);
        h = (h - pool->size) / pool->size + 1;
        w = (w - pool->size) / pool->size + 1;
      } else {
        const auto& dense = std::get<DenseLayer>(layers[i]);
        const std::size_t in = spatial ? c * h * w : flat;
        if (dense.in_features != in) throw DimensionError("dense input features" + where);
        flat = dense.out_features;
        spatial = false;
      }
    }
    return spatial ? c * h * w : flat;
  }

  std::vector<ConvLayer> convs() const {
    std::vector<ConvLayer> out;
    for (const auto& l : layers)
      if (const auto* c = std::get_if<ConvLayer>(&l)) out.push_back(*c);
    return out;
  }

  std::size_t norm_count() const {
    std::size_t n = 0;
    for (const auto& c : convs()) n += c.norm ? 1 : 0;
    return n;
  }

  std::size_t mask_scalar_count() const {
    std::size_t n = 0;
    for (const auto& c : convs()) n += kernel_wise_count(c.out_channels, c.in_channels);
    return n;
  }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;

  /// Builds conv/pool stacks: each entry of `widths` is a 3x3 conv + norm +
  /// relu, followed by a 2x2 pool when `pool_after` says so, then one dense
  /// feature layer.
  static BackboneConfig stack(std::size_t channels, std::size_t height, std::size_t width,
                              const std::vector<std::size_t>& widths,
                              const std::vector<bool>& pool_after, std::size_t features) {
    BackboneConfig cfg{channels, height, width, {}};
    std::size_t c = channels, h = height, w = width;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      cfg.layers.emplace_back(ConvLayer{widths[i], c, 3, 1, 1, true, true});
      c = widths[i];
      if (i < pool_after.size() && pool_after[i]) {
        cfg.layers.emplace_back(PoolLayer{2});
        h /= 2;
        w /= 2;
      }
    }
    cfg.layers.emplace_back(DenseLayer{features, c * h * w, true});
    return cfg;
  }

  /// Four 3x3 conv layers (32, 64, 128, 128) with pooling, 256-d features.
  static BackboneConfig desk_default() {
    return stack(3, 32, 32, {32, 64, 128, 128}, {true, true, true, true}, 256);
  }

  /// VGG16-BN conv stack for 32x32 inputs.
  static BackboneConfig vgg16_bn_cifar() {
    return stack(3, 32, 32, {64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512},
                 {false, true, false, true, false, false, true, false, false, true, false, false, true},
                 512);
  }

  /// Small four-conv network for synthetic desk-scale runs.
  static BackboneConfig tiny(std::size_t channels, std::size_t side) {
    return stack(channels, side, side, {8, 8, 16, 16}, {false, true, false, true}, 32);
  }
};

/// 64-bit FNV-1a over the float32 image of every weight value.
class ContentHasher {
 public:
  void update(std::span<const std::uint8_t> bytes) {
    for (auto b : bytes) {
      state_ ^= b;
      state_ *= 1099511628211ULL;
    }
  }
  template <std::floating_point T>
  void update_values(std::span<const T> values) {
    for (T v : values) {
      const float f = static_cast<float>(v);
      std::uint8_t raw[4];
      std::memcpy(raw, &f, 4);
      update(raw);
    }
  }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 14695981039346656037ULL;
};

/// Convolution and dense feature weights W_1. Conv layers carry no bias.
template <std::floating_point T>
struct Backbone {
  BackboneConfig config;
  std::vector<Tensor<T>> conv_weights;
  std::vector<Tensor<T>> dense_weights;
  std::vector<Tensor<T>> dense_biases;
  bool frozen = false;

  /// He-normal initialization, deterministic in `seed`.
  static Backbone init(const BackboneConfig& config, std::uint64_t seed) {
    config.feature_dim();
    Backbone b;
    b.config = config;
    std::mt19937_64 rng(seed);
    for (const auto& l : config.layers) {
      if (const auto* conv = std::get_if<ConvLayer>(&l)) {
        const double fan_in = double(conv->in_channels * conv->kernel * conv->kernel);
        b.conv_weights.push_back(random_normal(conv->weight_shape(), std::sqrt(2.0 / fan_in), rng));
      } else if (const auto* dense = std::get_if<DenseLayer>(&l)) {
        const double fan_in = double(dense->in_features);
        b.dense_weights.push_back(
            random_normal({dense->out_features, dense->in_features}, std::sqrt(2.0 / fan_in), rng));
        b.dense_biases.push_back(Tensor<T>::full({dense->out_features}, T(0), true));
      }
    }
    return b;
  }

  static Tensor<T> random_normal(const Shape& shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(shape, std::move(v), true);
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> p = conv_weights;
    p.insert(p.end(), dense_weights.begin(), dense_weights.end());
    p.insert(p.end(), dense_biases.begin(), dense_biases.end());
    return p;
  }

  /// Stops gradient tracking on every weight.
  void freeze() {
    for (auto& p : parameters()) p.set_requires_grad(false);
    frozen = true;
  }

  void unfreeze() {
    for (auto& p : parameters()) p.set_requires_grad(true);
    frozen = false;
  }

  Backbone clone() const {
    Backbone b;
    b.config = config;
    for (const auto& w : conv_weights) b.conv_weights.push_back(w.clone());
    for (const auto& w : dense_weights) b.dense_weights.push_back(w.clone());
    for (const auto& w : dense_biases) b.dense_biases.push_back(w.clone());
    b.frozen = frozen;
    return b;
  }

  std::uint64_t content_hash() const {
    ContentHasher h;
    for (const auto& p : parameters()) h.update_values<T>(p.data());
    return h.digest();
  }
};

/// Everything one task needs on top of the shared backbone.
template <std::floating_point T>
struct TaskArtifact {
  std::uint32_t task_id = 0;
  StrategySpec strategy;
  MaskHyperparams hp;
  std::vector<int> classes;
  bool initial = false;

  std::vector<Tensor<T>> real_masks;  // while training
  std::vector<FrozenMask> masks;      // once finalized
  std::vector<Tensor<T>> mask_values;

  std::vector<BatchNorm2d<T>> norms;  // one per conv layer with norm
  Tensor<T> head_weight;
  Tensor<T> head_bias;
  std::uint64_t backbone_hash = 0;
  bool finalized = false;

  std::size_t num_classes() const { return head_weight.dim(0); }
};

/// y = conv2d(x, W * M) with the mask broadcast over kernels (kernel-wise)
/// or applied per weight (element-wise).
template <std::floating_point T>
Tensor<T> masked_conv_forward(const Tensor<T>& x, const Tensor<T>& weight, const ConvLayer& layer,
                              const Tensor<T>& mask, Granularity granularity = Granularity::kKernelWise) {
  if (weight.shape() != layer.weight_shape()) {
    throw DimensionError("masked_conv_forward: weight " + shape_str(weight.shape()) +
                         " does not match layer spec");
  }
  const Shape expected = granularity == Granularity::kKernelWise
                             ? Shape{layer.out_channels, layer.in_channels}
                             : layer.weight_shape();
  if (mask.shape() != expected) {
    throw DimensionError("masked_conv_forward: mask " + shape_str(mask.shape()) + " expected " +
                         shape_str(expected));
  }
  const Tensor<T> effective =
      granularity == Granularity::kKernelWise ? kernel_scale(weight, mask) : mul(weight, mask);
  return conv2d(x, effective, layer.stride, layer.pad);
}

/// Shared backbone plus one artifact per task.
template <std::floating_point T>
class MaskedModel {
 public:
  MaskedModel() = default;
  explicit MaskedModel(Backbone<T> backbone) : backbone_(std::move(backbone)) {}

  Backbone<T>& backbone() { return backbone_; }
  const Backbone<T>& backbone() const { return backbone_; }

  bool has_task(std::uint32_t id) const { return tasks_.contains(id); }
  TaskArtifact<T>& task(std::uint32_t id) {
    auto it = tasks_.find(id);
    if (it == tasks_.end()) throw UnknownTaskError("unknown task id " + std::to_string(id));
    return it->second;
  }
  const TaskArtifact<T>& task(std::uint32_t id) const {
    auto it = tasks_.find(id);
    if (it == tasks_.end()) throw UnknownTaskError("unknown task id " + std::to_string(id));
    return it->second;
  }
  TaskArtifact<T>& add_task(TaskArtifact<T> artifact) {
    const auto id = artifact.task_id;
    tasks_.insert_or_assign(id, std::move(artifact));
    return tasks_.at(id);
  }
  std::vector<std::uint32_t> task_ids() const {
    std::vector<std::uint32_t> ids;
    for (const auto& [id, _] : tasks_) ids.push_back(id);
    return ids;
  }

  /// Fresh artifact for the initial task: identity masks, new norms and head.
  TaskArtifact<T> make_initial_artifact(std::uint32_t id, std::size_t classes, StrategySpec strategy,
                                        const MaskHyperparams& hp, std::uint64_t seed) const {
    TaskArtifact<T> a;
    a.task_id = id;
    a.strategy = strategy;
    a.hp = hp;
    a.initial = true;
    for (const auto& c : backbone_.config.convs())
      if (c.norm) a.norms.push_back(BatchNorm2d<T>::make(c.out_channels));
    init_head(a, classes, seed);
    return a;
  }

  /// Fresh artifact for a later task: all-keep masks, norms copied from
  /// `norm_source`, new head.
  TaskArtifact<T> make_task_artifact(std::uint32_t id, std::size_t classes, StrategySpec strategy,
                                     const MaskHyperparams& hp, const TaskArtifact<T>& norm_source,
                                     std::uint64_t seed) const {
    hp.validate();
    const MaskPipeline pipeline = make_strategy(strategy);
    TaskArtifact<T> a;
    a.task_id = id;
    a.strategy = strategy;
    a.hp = hp;
    if (!pipeline.finetune()) {
      for (const auto& w : backbone_.conv_weights)
        a.real_masks.push_back(pipeline.init_real_mask<T>(w.shape(), hp));
    }
    for (const auto& n : norm_source.norms) a.norms.push_back(n.clone());
    init_head(a, classes, seed);
    return a;
  }

  /// Replaces the real masks by their stored form and records the backbone hash.
  void finalize(TaskArtifact<T>& a) const {
    const MaskPipeline pipeline = make_strategy(a.strategy);
    a.masks.clear();
    a.mask_values.clear();
    for (std::size_t i = 0; i < backbone_.conv_weights.size(); ++i) {
      const Shape& ws = backbone_.conv_weights[i].shape();
      const auto id = static_cast<std::uint32_t>(i);
      if (a.initial || pipeline.finetune()) {
        const auto [rows, cols] = MaskPipeline(StrategySpec{}).stored_dims(ws);
        a.masks.push_back(FrozenMask::all_ones(id, rows, cols));
      } else {
        a.masks.push_back(pipeline.freeze<T>(id, a.real_masks.at(i), ws, a.hp));
      }
    }
    load_mask_values(a);
    a.backbone_hash = backbone_.content_hash();
    a.finalized = true;
  }

  /// Rebuilds the dense mask tensors from the stored masks.
  void load_mask_values(TaskArtifact<T>& a) const {
    const bool identity = a.initial || a.strategy.finetune;
    const MaskPipeline pipeline = identity ? MaskPipeline(StrategySpec{}) : make_strategy(a.strategy);
    if (a.masks.size() != backbone_.conv_weights.size()) {
      throw DimensionError("artifact has " + std::to_string(a.masks.size()) + " masks for " +
                           std::to_string(backbone_.conv_weights.size()) + " conv layers");
    }
    a.mask_values.clear();
    for (std::size_t i = 0; i < a.masks.size(); ++i)
      a.mask_values.push_back(pipeline.frozen_tensor<T>(a.masks[i], backbone_.conv_weights[i].shape()));
  }

  /// Logits for `x` under the given artifact. Finalized artifacts use their
  /// stored masks; otherwise the live mask chain of the strategy is built.
  Tensor<T> forward(const Tensor<T>& x, TaskArtifact<T>& a, Mode mode,
                    std::mt19937_64* noise_rng = nullptr) const {
    const bool identity = a.initial || a.strategy.finetune;
    const MaskPipeline pipeline = identity ? MaskPipeline(StrategySpec{}) : make_strategy(a.strategy);
    Tensor<T> h = x;
    std::size_t conv_i = 0, norm_i = 0, dense_i = 0;
    for (const auto& layer : backbone_.config.layers) {
      if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
        const Tensor<T>& w = backbone_.conv_weights[conv_i];
        if (a.finalized) {
          h = conv2d(h, pipeline.apply(w, a.mask_values[conv_i]), conv->stride, conv->pad);
        } else if (!identity) {
          const auto parts = pipeline.live(a.real_masks[conv_i], a.hp, noise_rng);
          h = conv2d(h, pipeline.apply(w, parts.soft), conv->stride, conv->pad);
        } else {
          h = conv2d(h, w, conv->stride, conv->pad);
        }
        ++conv_i;
        if (conv->norm) h = batch_norm2d(h, a.norms[norm_i++], mode);
        if (conv->relu) h = relu(h);
      } else if (const auto* pool = std::get_if<PoolLayer>(&layer)) {
        h = max_pool2d(h, pool->size);
      } else {
        const auto& dense_spec = std::get<DenseLayer>(layer);
        if (h.rank() != 2) h = flatten(h);
        h = dense(h, backbone_.dense_weights[dense_i], backbone_.dense_biases[dense_i]);
        ++dense_i;
        if (dense_spec.relu) h = relu(h);
      }
    }
    if (h.rank() != 2) h = flatten(h);
    return dense(h, a.head_weight, a.head_bias);
  }

  Tensor<T> forward_task(const Tensor<T>& x, std::uint32_t id, Mode mode = Mode::kEval) {
    return forward(x, task(id), mode);
  }

  /// Masks, head and norm affine parameters of task `id`; backbone weights
  /// only for the fine-tuning strategy.
  std::vector<Tensor<T>> trainable_parameters(std::uint32_t id) {
    auto& a = task(id);
    std::vector<Tensor<T>> p;
    if (a.initial || a.strategy.finetune) {
      for (const auto& w : backbone_.parameters()) p.push_back(w);
    } else {
      for (const auto& m : a.real_masks) p.push_back(m);
    }
    p.push_back(a.head_weight);
    p.push_back(a.head_bias);
    for (const auto& n : a.norms) {
      p.push_back(n.gamma);
      p.push_back(n.beta);
    }
    return p;
  }

 private:
  void init_head(TaskArtifact<T>& a, std::size_t classes, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    const std::size_t features = backbone_.config.feature_dim();
    a.head_weight =
        Backbone<T>::random_normal({classes, features}, std::sqrt(1.0 / double(features)), rng);
    a.head_bias = Tensor<T>::full({classes}, T(0), true);
  }

  Backbone<T> backbone_;
  std::map<std::uint32_t, TaskArtifact<T>> tasks_;
};

}  // namespace ksm
