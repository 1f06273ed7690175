// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <random>

#include "ksm/io.hpp"
#include "ksm/report.hpp"

int main() {
  std::mt19937_64 rng(3);
  std::bernoulli_distribution keep(0.7);
  std::uniform_real_distribution<float> scale(0.0f, 1.0f);

  ksm::MaskFile file;
  for (std::uint32_t id = 0; id < 4; ++id) {
    ksm::FrozenMask m{id, 16u * (id + 1), 16u * (id + 1), {}, {}};
    for (std::size_t i = 0; i < std::size_t(m.rows) * m.cols; ++i) {
      m.bits.push_back(keep(rng) ? 1 : 0);
      if (!m.bits.back()) m.scales.push_back(scale(rng));
    }
    file.layers.push_back(std::move(m));
  }

  const auto bytes = ksm::encode_mask_file(file);
  const auto again = ksm::encode_mask_file(ksm::decode_mask_file(bytes));
  std::cout << "encoded " << bytes.size() << " bytes, round trip "
            << (bytes == again ? "identical" : "DIFFERENT") << '\n';

  const std::vector<ksm::KernelGeometry> kernels(file.layers.size(), ksm::KernelGeometry{3, 3});
  std::cout << ksm::overhead_json(ksm::overhead(file.layers, kernels)).dump(2) << '\n';
  return bytes == again ? 0 : 1;
}
