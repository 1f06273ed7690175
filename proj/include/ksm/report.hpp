// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ksm/io.hpp"
#include "ksm/mask.hpp"
#include "ksm/trainer.hpp"

namespace ksm {

inline constexpr const char* kLedgerSchema = "ksm.ledger/1";
inline constexpr const char* kStatsSchema = "ksm.stats/1";

/// Share of kept kernels vs kernels carrying a scaling factor in one layer.
struct LayerMaskStats {
  std::uint32_t layer_id = 0;
  std::size_t entries = 0;
  std::size_t ones = 0;
  double ones_ratio = 0.0;
  double scale_ratio = 0.0;
  double mean_scale = 0.0;
};

inline LayerMaskStats layer_stats(const FrozenMask& m) {
  LayerMaskStats s;
  s.layer_id = m.layer_id;
  s.entries = m.size();
  s.ones = m.ones();
  if (s.entries > 0) {
    s.ones_ratio = double(s.ones) / double(s.entries);
    s.scale_ratio = 1.0 - s.ones_ratio;
  }
  if (!m.scales.empty()) {
    double total = 0.0;
    for (float v : m.scales) total += v;
    s.mean_scale = total / double(m.scales.size());
  }
  return s;
}

/// Storage accounting for one mask file. Bit counts refer to the binary
/// part only; "element-wise" is the same mask expanded to one bit per weight.
struct OverheadReport {
  std::size_t layers = 0;
  std::size_t mask_bits = 0;
  std::size_t element_wise_bits = 0;
  std::size_t stored_scales = 0;
  std::size_t mask_bytes = 0;                // header + layers, as stored
  std::size_t binary_bytes = 0;              // same layers without scale payload
  std::size_t element_wise_binary_bytes = 0; // one bit per weight, no scales
  double reduction = 0.0;                    // element_wise_bits / mask_bits
};

/// `kernels` gives kh*kw per layer; mask columns are divided by it when the
/// mask is element-wise (`element_wise` true).
inline OverheadReport overhead(const std::vector<FrozenMask>& layers,
                               const std::vector<KernelGeometry>& kernels, bool element_wise = false) {
  if (kernels.size() != layers.size()) throw DimensionError("overhead: kernel geometry per layer required");
  OverheadReport r;
  r.layers = layers.size();
  r.mask_bytes = mask_file_size(layers);
  r.binary_bytes = kMaskHeaderBytes;
  r.element_wise_binary_bytes = kMaskHeaderBytes;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::size_t area = std::size_t(kernels[i].kh) * kernels[i].kw;
    const std::size_t per_weight = element_wise ? l.size() : l.size() * area;
    r.mask_bits += l.size();
    r.element_wise_bits += per_weight;
    r.stored_scales += l.zeros();
    r.binary_bytes += kMaskLayerHeaderBytes + packed_bytes(l.size());
    r.element_wise_binary_bytes += kMaskLayerHeaderBytes + packed_bytes(per_weight);
  }
  r.reduction = r.mask_bits ? double(r.element_wise_bits) / double(r.mask_bits) : 0.0;
  return r;
}

inline std::string format_double(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}

/// task,acc,seconds (one row per trained task, training order).
inline std::string ledger_csv(const RunLedger& ledger) {
  std::ostringstream os;
  os << "task,acc,seconds\n";
  for (std::size_t i = 0; i < ledger.task_order.size(); ++i) {
    os << ledger.task_order[i] << ',' << format_double(ledger.final_accuracy[i], 4) << ','
       << format_double(ledger.seconds[i], 4) << '\n';
  }
  return os.str();
}

inline nlohmann::json ledger_json(const RunLedger& ledger) {
  nlohmann::json matrix = nlohmann::json::array();
  for (const auto& row : ledger.accuracy) {
    nlohmann::json r = nlohmann::json::array();
    for (const auto& v : row) r.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    matrix.push_back(r);
  }
  return {{"schema", kLedgerSchema},
          {"strategy", ledger.strategy},
          {"seed", ledger.seed},
          {"task_order", ledger.task_order},
          {"final_accuracy", ledger.final_accuracy},
          {"mean_accuracy", ledger.mean_final_accuracy()},
          {"seconds", ledger.seconds},
          {"epochs", ledger.epochs},
          {"accuracy_matrix", matrix},
          {"no_forgetting", ledger.no_forgetting()}};
}

/// layer,entries,ones,ones_ratio,scale_ratio,mean_scale
inline std::string stats_csv(const std::vector<LayerMaskStats>& stats) {
  std::ostringstream os;
  os << "layer,entries,ones,ones_ratio,scale_ratio,mean_scale\n";
  for (const auto& s : stats) {
    os << s.layer_id << ',' << s.entries << ',' << s.ones << ',' << format_double(s.ones_ratio) << ','
       << format_double(s.scale_ratio) << ',' << format_double(s.mean_scale) << '\n';
  }
  return os.str();
}

inline nlohmann::json overhead_json(const OverheadReport& r) {
  return {{"layers", r.layers},
          {"mask_bits", r.mask_bits},
          {"element_wise_bits", r.element_wise_bits},
          {"reduction", r.reduction},
          {"stored_scales", r.stored_scales},
          {"mask_bytes", r.mask_bytes},
          {"binary_bytes", r.binary_bytes},
          {"element_wise_binary_bytes", r.element_wise_binary_bytes}};
}

}  // namespace ksm
