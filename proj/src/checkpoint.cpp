// SPDX-License-Identifier: Apache-2.0
#include "mmae/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace mmae {

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw FormatError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

constexpr std::uint64_t kMaxName = 4096;
constexpr std::uint64_t kMaxRank = 8;
constexpr std::uint64_t kMaxElems = 1ULL << 32;

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(Checkpoint::kMagic, 5);
    put_u32(out, Checkpoint::kVersion);
    put_u64(out, ckpt.seed);
    put_u64(out, ckpt.step);
    put_u64(out, ckpt.epoch);
    put_u64(out, ckpt.config.size());
    out.write(ckpt.config.data(), static_cast<std::streamsize>(ckpt.config.size()));
    put_u64(out, ckpt.tensors.size());
    for (const auto& [name, tensor] : ckpt.tensors) {
      put_u64(out, name.size());
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put_u64(out, static_cast<std::uint64_t>(tensor.rank()));
      for (int d : tensor.shape()) put_u64(out, static_cast<std::uint64_t>(d));
      const Arr& v = tensor.value();
      for (Eigen::Index i = 0; i < v.size(); ++i) put_f64(out, v(i));
    }
    if (!out) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);

  char magic[5];
  if (!in.read(magic, 5)) throw FormatError("checkpoint truncated");
  if (std::memcmp(magic, Checkpoint::kMagic, 5) != 0) {
    throw FormatError("bad checkpoint magic");
  }
  const std::uint32_t version = get_u32(in);
  if (version != Checkpoint::kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }

  Checkpoint ckpt;
  ckpt.seed = get_u64(in);
  ckpt.step = get_u64(in);
  ckpt.epoch = get_u64(in);
  const std::uint64_t config_len = get_u64(in);
  if (config_len > (1ULL << 24)) throw FormatError("implausible config length");
  ckpt.config.resize(config_len);
  if (config_len > 0 &&
      !in.read(ckpt.config.data(), static_cast<std::streamsize>(config_len))) {
    throw FormatError("checkpoint truncated");
  }

  const std::uint64_t count = get_u64(in);
  if (count > 1ULL << 20) throw FormatError("implausible tensor count");
  for (std::uint64_t t = 0; t < count; ++t) {
    const std::uint64_t name_len = get_u64(in);
    if (name_len == 0 || name_len > kMaxName) throw FormatError("implausible tensor name");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name_len))) {
      throw FormatError("checkpoint truncated");
    }
    const std::uint64_t rank = get_u64(in);
    if (rank > kMaxRank) throw FormatError("implausible tensor rank");
    std::vector<int> shape;
    std::uint64_t numel = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      const std::uint64_t dim = get_u64(in);
      if (dim > kMaxElems) throw FormatError("implausible dimension");
      numel *= dim;
      if (numel > kMaxElems) throw FormatError("implausible tensor size");
      shape.push_back(static_cast<int>(dim));
    }
    Arr values(static_cast<Eigen::Index>(numel));
    for (std::uint64_t i = 0; i < numel; ++i) {
      values(static_cast<Eigen::Index>(i)) = get_f64(in);
    }
    ckpt.tensors.emplace_back(std::move(name), Tensor::from_flat(std::move(shape), std::move(values)));
  }
  // Anything left over means the writer and reader disagree.
  in.peek();
  if (!in.eof()) throw FormatError("trailing bytes after last tensor");
  return ckpt;
}

}  // namespace mmae
