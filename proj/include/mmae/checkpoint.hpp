// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mmae/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace mmae {

// Binary tensor container. Little-endian throughout, all values f64:
//
//   magic "MMAE1" | version u32 | seed u64 | step u64 | epoch u64
//   | config_len u64 | config bytes
//   | tensor_count u64
//   | per tensor: name_len u64 | name | rank u64 | dims u64[rank]
//                 | values f64[numel]
//
// Writes are atomic (temp file + rename); loads validate every length field
// so a corrupted header raises a format error rather than yielding a wrong
// tensor.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  static constexpr char kMagic[5] = {'M', 'M', 'A', 'E', '1'};

  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::string config;
  std::vector<std::pair<std::string, Tensor>> tensors;  // insertion order preserved

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mmae
