// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

// Binary container shared by clip frames and checkpoints.
//
// Layout (little-endian):
//   "MV4D"            4 bytes magic
//   version           u32
//   repeated until EOF:
//     name length     u32
//     name            bytes (UTF-8, no terminator)
//     dtype code      u8   (see DType)
//     rank            u32
//     extents         u64 x rank
//     data            raw element bytes, row-major

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mim4d/tensor.hpp"

namespace mim4d::io {

inline constexpr char kMagic[4] = {'M', 'V', '4', 'D'};
inline constexpr std::uint32_t kBlobVersion = 1;

enum class DType : std::uint8_t { kF64 = 0, kF32 = 1, kI64 = 2, kU8 = 3, kI32 = 4 };

std::size_t dtype_size(DType t);

struct NamedArray {
  std::string name;
  DType dtype = DType::kF64;
  std::vector<std::uint64_t> extents;
  std::vector<std::uint8_t> bytes;
};

class BlobError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Blob {
 public:
  std::uint32_t version = kBlobVersion;

  void put(const std::string& name, const Tensor& t);
  void put_i64(const std::string& name, const std::vector<std::int64_t>& values, Shape shape = {});
  void put_u8(const std::string& name, const std::vector<std::uint8_t>& values, Shape shape = {});
  void put_string(const std::string& name, const std::string& text);

  bool has(const std::string& name) const;
  const NamedArray& at(const std::string& name) const;
  Tensor tensor(const std::string& name) const;
  std::vector<std::int64_t> i64(const std::string& name) const;
  std::vector<std::uint8_t> u8(const std::string& name) const;
  std::string string(const std::string& name) const;

  const std::vector<NamedArray>& arrays() const { return arrays_; }

  std::vector<std::uint8_t> serialize() const;
  static Blob deserialize(const std::vector<std::uint8_t>& bytes);

  /// Writes to a temporary sibling and renames, so readers never see a partial file.
  void write(const std::filesystem::path& path) const;
  static Blob read(const std::filesystem::path& path);

 private:
  void insert(NamedArray a);
  std::vector<NamedArray> arrays_;
};

}  // namespace mim4d::io
