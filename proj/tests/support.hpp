// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

namespace ksm::testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("ksm-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// CIFAR-style records: `label_bytes` label bytes (last one is the label)
/// followed by 3072 pixel bytes.
inline std::vector<std::uint8_t> fake_cifar_records(const std::vector<int>& labels, std::size_t label_bytes,
                                                    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint8_t> out;
  for (int l : labels) {
    for (std::size_t i = 0; i + 1 < label_bytes; ++i) out.push_back(std::uint8_t(l / 5));
    out.push_back(std::uint8_t(l));
    for (int i = 0; i < 3072; ++i) out.push_back(std::uint8_t(rng() & 0xFF));
  }
  return out;
}

}  // namespace ksm::testing
