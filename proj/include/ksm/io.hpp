// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

// Binary formats (all integers and floats little-endian):
//
// Mask file
//   "KSM1" | u16 version | f64 k | f64 tau | f64 T | u32 layer_count
//   per layer: u32 layer_id | u32 c_out | u32 c_in
//              | ceil(c_out*c_in/8) bytes of bits, row-major, MSB first, zero padded
//              | one f32 scale per zero bit, ascending index order
//   optional task section:
//   "TASK" | u32 task_id | u64 backbone_hash | u32 len + strategy name
//          | u32 n + n x i32 classes | u32 n + n x (u32 kh, u32 kw)
//          | u32 n + n x (u32 len + name | u32 rank | rank x u32 dims | f32 values)
//
// Checkpoint file
//   "KSMC" | u16 version | u32 len + backbone config JSON
//   | u32 n + n x (u32 rank | rank x u32 dims | f32 values) | u64 content hash

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <unistd.h>
#include <vector>

#include <nlohmann/json.hpp>

#include "ksm/errors.hpp"
#include "ksm/mask.hpp"
#include "ksm/model.hpp"

namespace ksm {

static_assert(std::endian::native == std::endian::little, "serialization assumes little-endian");

inline constexpr std::uint16_t kMaskFileVersion = 1;
inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr std::size_t kMaskHeaderBytes = 4 + 2 + 3 * 8 + 4;
inline constexpr std::size_t kMaskLayerHeaderBytes = 12;

class ByteWriter {
 public:
  template <class V>
  void put(V value) {
    static_assert(std::is_trivially_copyable_v<V>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(V));
  }
  void put_tag(const char (&tag)[5]) { bytes_.insert(bytes_.end(), tag, tag + 4); }
  void put_bytes(std::span<const std::uint8_t> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }
  std::size_t size() const { return bytes_.size(); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <class V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::span<const std::uint8_t> get_bytes(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool tag_is(const char (&tag)[5]) {
    auto b = get_bytes(4);
    return std::memcmp(b.data(), tag, 4) == 0;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    auto b = get_bytes(n);
    return std::string(b.begin(), b.end());
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(FormatErrorKind::kTruncated, "needed " + std::to_string(n) + " bytes at offset " +
                                                         std::to_string(pos_));
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

/// Raw float tensor stored in the task section.
struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct KernelGeometry {
  std::uint32_t kh = 3;
  std::uint32_t kw = 3;
  friend bool operator==(const KernelGeometry&, const KernelGeometry&) = default;
};

/// Head, normalization and provenance data saved next to the masks.
struct TaskSection {
  std::uint32_t task_id = 0;
  std::uint64_t backbone_hash = 0;
  std::string strategy;
  std::vector<int> classes;
  std::vector<KernelGeometry> kernels;
  std::vector<NamedTensor> tensors;

  const NamedTensor& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw FormatError(FormatErrorKind::kMalformed, "task section lacks tensor '" + name + "'");
  }
  friend bool operator==(const TaskSection&, const TaskSection&) = default;
};

struct MaskFile {
  double k = 20.0;
  double tau = 0.0;
  double temperature = 0.5;
  std::vector<FrozenMask> layers;
  std::optional<TaskSection> task;
  friend bool operator==(const MaskFile&, const MaskFile&) = default;
};

inline std::size_t packed_bytes(std::size_t bits) { return (bits + 7) / 8; }

/// Size of the mask part of a file (header and layers, no task section).
inline std::size_t mask_file_size(std::span<const FrozenMask> layers) {
  std::size_t total = kMaskHeaderBytes;
  for (const auto& l : layers) total += kMaskLayerHeaderBytes + packed_bytes(l.size()) + 4 * l.zeros();
  return total;
}

inline std::vector<std::uint8_t> pack_bits(std::span<const std::uint8_t> bits) {
  std::vector<std::uint8_t> out(packed_bytes(bits.size()), 0);
  for (std::size_t i = 0; i < bits.size(); ++i)
    if (bits[i]) out[i / 8] |= static_cast<std::uint8_t>(0x80u >> (i % 8));
  return out;
}

inline std::vector<std::uint8_t> unpack_bits(std::span<const std::uint8_t> packed, std::size_t count) {
  std::vector<std::uint8_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = (packed[i / 8] >> (7 - i % 8)) & 1u;
  return out;
}

namespace detail {

inline void put_tensor_body(ByteWriter& w, const Shape& shape, std::span<const float> values) {
  w.put(static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) w.put(static_cast<std::uint32_t>(d));
  for (float v : values) w.put(v);
}

inline std::pair<Shape, std::vector<float>> get_tensor_body(ByteReader& r) {
  const auto rank = r.get<std::uint32_t>();
  if (rank > 8) throw FormatError(FormatErrorKind::kMalformed, "tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = r.get<std::uint32_t>();
  const std::size_t n = numel_of(shape);
  if (n * 4 > r.remaining()) throw FormatError(FormatErrorKind::kTruncated, "tensor payload");
  std::vector<float> values(n);
  for (auto& v : values) v = r.get<float>();
  return {std::move(shape), std::move(values)};
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_mask_file(const MaskFile& file) {
  ByteWriter w;
  w.put_tag("KSM1");
  w.put(kMaskFileVersion);
  w.put(file.k);
  w.put(file.tau);
  w.put(file.temperature);
  w.put(static_cast<std::uint32_t>(file.layers.size()));
  for (const auto& l : file.layers) {
    l.validate();
    w.put(l.layer_id);
    w.put(l.rows);
    w.put(l.cols);
    w.put_bytes(pack_bits(l.bits));
    for (float s : l.scales) w.put(s);
  }
  if (file.task) {
    const auto& t = *file.task;
    w.put_tag("TASK");
    w.put(t.task_id);
    w.put(t.backbone_hash);
    w.put_string(t.strategy);
    w.put(static_cast<std::uint32_t>(t.classes.size()));
    for (int c : t.classes) w.put(static_cast<std::int32_t>(c));
    w.put(static_cast<std::uint32_t>(t.kernels.size()));
    for (const auto& k : t.kernels) {
      w.put(k.kh);
      w.put(k.kw);
    }
    w.put(static_cast<std::uint32_t>(t.tensors.size()));
    for (const auto& nt : t.tensors) {
      if (numel_of(nt.shape) != nt.values.size())
        throw InvariantError("task tensor '" + nt.name + "' shape does not match values");
      w.put_string(nt.name);
      detail::put_tensor_body(w, nt.shape, nt.values);
    }
  }
  return w.take();
}

inline MaskFile decode_mask_file(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (bytes.size() < 4 || !r.tag_is("KSM1")) throw FormatError(FormatErrorKind::kBadMagic, "not a KSM1 mask file");
  const auto version = r.get<std::uint16_t>();
  if (version != kMaskFileVersion) {
    throw FormatError(FormatErrorKind::kUnsupportedVersion, "mask file version " + std::to_string(version));
  }
  MaskFile file;
  file.k = r.get<double>();
  file.tau = r.get<double>();
  file.temperature = r.get<double>();
  const auto count = r.get<std::uint32_t>();
  if (count > r.remaining() / kMaskLayerHeaderBytes) {
    throw FormatError(FormatErrorKind::kCountMismatch, "layer count " + std::to_string(count) +
                                                           " exceeds file size");
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    FrozenMask m;
    m.layer_id = r.get<std::uint32_t>();
    m.rows = r.get<std::uint32_t>();
    m.cols = r.get<std::uint32_t>();
    const std::size_t n = m.size();
    const auto packed = r.get_bytes(packed_bytes(n));
    if (n % 8 != 0 && (packed.back() & (0xFFu >> (n % 8))) != 0) {
      throw FormatError(FormatErrorKind::kMalformed, "nonzero padding bits in layer " + std::to_string(i));
    }
    m.bits = unpack_bits(packed, n);
    const std::size_t zeros = m.zeros();
    if (zeros * 4 > r.remaining()) {
      throw FormatError(FormatErrorKind::kTruncated, "layer " + std::to_string(i) + " expects " +
                                                         std::to_string(zeros) + " scales");
    }
    m.scales.resize(zeros);
    for (auto& s : m.scales) {
      s = r.get<float>();
      if (!(s >= 0.0f && s <= 1.0f)) throw FormatError(FormatErrorKind::kMalformed, "scale outside [0,1]");
    }
    file.layers.push_back(std::move(m));
  }
  if (r.done()) return file;

  if (!r.tag_is("TASK")) {
    throw FormatError(FormatErrorKind::kCountMismatch, "trailing bytes after " + std::to_string(count) + " layers");
  }
  TaskSection t;
  t.task_id = r.get<std::uint32_t>();
  t.backbone_hash = r.get<std::uint64_t>();
  t.strategy = r.get_string();
  const auto n_classes = r.get<std::uint32_t>();
  if (n_classes > r.remaining() / 4) throw FormatError(FormatErrorKind::kTruncated, "class list");
  for (std::uint32_t i = 0; i < n_classes; ++i) t.classes.push_back(r.get<std::int32_t>());
  const auto n_kernels = r.get<std::uint32_t>();
  if (n_kernels != file.layers.size()) {
    throw FormatError(FormatErrorKind::kCountMismatch, "kernel geometry count != layer count");
  }
  for (std::uint32_t i = 0; i < n_kernels; ++i) {
    KernelGeometry k;
    k.kh = r.get<std::uint32_t>();
    k.kw = r.get<std::uint32_t>();
    t.kernels.push_back(k);
  }
  const auto n_tensors = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    NamedTensor nt;
    nt.name = r.get_string();
    auto [shape, values] = detail::get_tensor_body(r);
    nt.shape = std::move(shape);
    nt.values = std::move(values);
    t.tensors.push_back(std::move(nt));
  }
  if (!r.done()) throw FormatError(FormatErrorKind::kCountMismatch, "trailing bytes after task section");
  file.task = std::move(t);
  return file;
}

/// Writes to a sibling temp file and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataMissingError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void save_mask(const std::filesystem::path& path, const MaskFile& file) {
  write_file_atomic(path, encode_mask_file(file));
}

inline MaskFile load_mask(const std::filesystem::path& path) {
  return decode_mask_file(read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// TaskArtifact <-> MaskFile
// ---------------------------------------------------------------------------

namespace detail {

template <std::floating_point T>
NamedTensor named(std::string name, const Tensor<T>& t) {
  std::vector<float> v(t.data().begin(), t.data().end());
  return NamedTensor{std::move(name), t.shape(), std::move(v)};
}

template <std::floating_point T>
Tensor<T> restore(const NamedTensor& nt, bool requires_grad) {
  return Tensor<T>(nt.shape, std::vector<T>(nt.values.begin(), nt.values.end()), requires_grad);
}

}  // namespace detail

template <std::floating_point T>
MaskFile artifact_to_file(const TaskArtifact<T>& a, const Backbone<T>& backbone) {
  if (!a.finalized) throw ContractError("artifact must be finalized before saving");
  MaskFile f{a.hp.k, a.hp.tau, a.hp.temperature, a.masks, TaskSection{}};
  auto& t = *f.task;
  t.task_id = a.task_id;
  t.backbone_hash = a.backbone_hash;
  t.strategy = strategy_name(a.strategy);
  if (a.initial) t.strategy += "+initial";
  t.classes = a.classes;
  for (const auto& w : backbone.conv_weights)
    t.kernels.push_back({static_cast<std::uint32_t>(w.dim(2)), static_cast<std::uint32_t>(w.dim(3))});
  t.tensors.push_back(detail::named("head.weight", a.head_weight));
  t.tensors.push_back(detail::named("head.bias", a.head_bias));
  for (std::size_t i = 0; i < a.norms.size(); ++i) {
    const auto p = "norm" + std::to_string(i) + ".";
    t.tensors.push_back(detail::named(p + "gamma", a.norms[i].gamma));
    t.tensors.push_back(detail::named(p + "beta", a.norms[i].beta));
    t.tensors.push_back(detail::named(p + "running_mean", a.norms[i].running_mean));
    t.tensors.push_back(detail::named(p + "running_var", a.norms[i].running_var));
  }
  return f;
}

/// Rebuilds a finalized artifact against `model`'s backbone.
template <std::floating_point T>
TaskArtifact<T> artifact_from_file(const MaskFile& f, const MaskedModel<T>& model) {
  if (!f.task) throw FormatError(FormatErrorKind::kMalformed, "mask file has no task section");
  const auto& t = *f.task;
  TaskArtifact<T> a;
  a.task_id = t.task_id;
  std::string name = t.strategy;
  const std::string suffix = "+initial";
  if (name.size() > suffix.size() && name.ends_with(suffix)) {
    a.initial = true;
    name.resize(name.size() - suffix.size());
  }
  a.strategy = strategy_from_name(name);
  a.hp.k = f.k;
  a.hp.tau = f.tau;
  a.hp.temperature = f.temperature;
  a.classes = t.classes;
  a.masks = f.layers;
  a.head_weight = detail::restore<T>(t.tensor("head.weight"), false);
  a.head_bias = detail::restore<T>(t.tensor("head.bias"), false);
  for (std::size_t i = 0; i < model.backbone().config.norm_count(); ++i) {
    const auto p = "norm" + std::to_string(i) + ".";
    BatchNorm2d<T> bn;
    bn.gamma = detail::restore<T>(t.tensor(p + "gamma"), false);
    bn.beta = detail::restore<T>(t.tensor(p + "beta"), false);
    bn.running_mean = detail::restore<T>(t.tensor(p + "running_mean"), false);
    bn.running_var = detail::restore<T>(t.tensor(p + "running_var"), false);
    a.norms.push_back(std::move(bn));
  }
  a.backbone_hash = t.backbone_hash;
  model.load_mask_values(a);
  a.finalized = true;
  return a;
}

// ---------------------------------------------------------------------------
// Backbone checkpoint
// ---------------------------------------------------------------------------

inline nlohmann::json config_to_json(const BackboneConfig& cfg) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : cfg.layers) {
    if (const auto* c = std::get_if<ConvLayer>(&l)) {
      layers.push_back({{"type", "conv"}, {"out", c->out_channels}, {"in", c->in_channels},
                        {"kernel", c->kernel}, {"stride", c->stride}, {"pad", c->pad},
                        {"norm", c->norm}, {"relu", c->relu}});
    } else if (const auto* p = std::get_if<PoolLayer>(&l)) {
      layers.push_back({{"type", "pool"}, {"size", p->size}});
    } else {
      const auto& d = std::get<DenseLayer>(l);
      layers.push_back({{"type", "dense"}, {"out", d.out_features}, {"in", d.in_features}, {"relu", d.relu}});
    }
  }
  return {{"input", {cfg.channels, cfg.height, cfg.width}}, {"layers", layers}};
}

inline BackboneConfig config_from_json(const nlohmann::json& j) {
  try {
    BackboneConfig cfg;
    cfg.channels = j.at("input").at(0);
    cfg.height = j.at("input").at(1);
    cfg.width = j.at("input").at(2);
    for (const auto& l : j.at("layers")) {
      const std::string type = l.at("type");
      if (type == "conv") {
        cfg.layers.emplace_back(ConvLayer{l.at("out"), l.at("in"), l.at("kernel"), l.at("stride"),
                                          l.at("pad"), l.at("norm"), l.at("relu")});
      } else if (type == "pool") {
        cfg.layers.emplace_back(PoolLayer{l.at("size")});
      } else if (type == "dense") {
        cfg.layers.emplace_back(DenseLayer{l.at("out"), l.at("in"), l.at("relu")});
      } else {
        throw FormatError(FormatErrorKind::kMalformed, "unknown layer type " + type);
      }
    }
    cfg.feature_dim();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::kMalformed, std::string("backbone config: ") + e.what());
  } catch (const DimensionError& e) {
    throw FormatError(FormatErrorKind::kMalformed, std::string("backbone config: ") + e.what());
  }
}

template <std::floating_point T>
std::vector<std::uint8_t> encode_checkpoint(const Backbone<T>& backbone) {
  ByteWriter w;
  w.put_tag("KSMC");
  w.put(kCheckpointVersion);
  w.put_string(config_to_json(backbone.config).dump());
  const auto params = backbone.parameters();
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    std::vector<float> v(p.data().begin(), p.data().end());
    detail::put_tensor_body(w, p.shape(), v);
  }
  w.put(backbone.content_hash());
  return w.take();
}

/// Loads a frozen backbone; throws FormatError(kHashMismatch) if the stored
/// content hash does not match the weights.
template <std::floating_point T>
Backbone<T> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (bytes.size() < 4 || !r.tag_is("KSMC")) throw FormatError(FormatErrorKind::kBadMagic, "not a KSMC checkpoint");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(FormatErrorKind::kUnsupportedVersion, "checkpoint version " + std::to_string(version));
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(r.get_string());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::kMalformed, std::string("checkpoint config: ") + e.what());
  }
  Backbone<T> b = Backbone<T>::init(config_from_json(j), 0);
  auto params = b.parameters();
  const auto count = r.get<std::uint32_t>();
  if (count != params.size()) {
    throw FormatError(FormatErrorKind::kCountMismatch, "checkpoint has " + std::to_string(count) +
                                                           " tensors, config needs " + std::to_string(params.size()));
  }
  for (auto& p : params) {
    auto [shape, values] = detail::get_tensor_body(r);
    if (shape != p.shape()) throw FormatError(FormatErrorKind::kCountMismatch, "tensor shape " + shape_str(shape));
    std::copy(values.begin(), values.end(), p.data().begin());
  }
  const auto stored = r.get<std::uint64_t>();
  if (!r.done()) throw FormatError(FormatErrorKind::kCountMismatch, "trailing bytes in checkpoint");
  b.freeze();
  if (b.content_hash() != stored) throw FormatError(FormatErrorKind::kHashMismatch, "checkpoint content hash");
  return b;
}

template <std::floating_point T>
void save_checkpoint(const std::filesystem::path& path, const Backbone<T>& backbone) {
  write_file_atomic(path, encode_checkpoint(backbone));
}

template <std::floating_point T>
Backbone<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(read_file_bytes(path));
}

}  // namespace ksm
